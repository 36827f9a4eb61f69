//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::latent::KernelConfig;
use crate::objectives::Objective;
use crate::seqmodel::ModelDims;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Dae,
    Vae,
    WaeD,
    WaeS,
    Ded,
    Ved,
    WedD,
    WedS,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Dae,
        Mode::Vae,
        Mode::WaeD,
        Mode::WaeS,
        Mode::Ded,
        Mode::Ved,
        Mode::WedD,
        Mode::WedS,
    ];

    /// Utterance → response training on a paired corpus.
    pub fn is_dialog(self) -> bool {
        matches!(self, Mode::Ded | Mode::Ved | Mode::WedD | Mode::WedS)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Mode::Vae | Mode::WaeS | Mode::Ved | Mode::WedS)
    }

    pub fn is_vae(self) -> bool {
        matches!(self, Mode::Vae | Mode::Ved)
    }

    pub fn is_wae(self) -> bool {
        matches!(self, Mode::WaeD | Mode::WaeS | Mode::WedD | Mode::WedS)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dae => "dae",
            Mode::Vae => "vae",
            Mode::WaeD => "wae-d",
            Mode::WaeS => "wae-s",
            Mode::Ded => "ded",
            Mode::Ved => "ved",
            Mode::WedD => "wed-d",
            Mode::WedS => "wed-s",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "invalid mode {s:?}; expected one of dae, vae, wae-d, wae-s, ded, ved, wed-d, wed-s"
                ))
            })
    }
}

/// Every hyperparameter of a run. Keys of the text form match field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative decay; dialog modes only.
    pub lr_decay: f64,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub lambda_vae: f64,
    pub lambda_wae: f64,
    pub lambda_kl: f64,
    pub anneal: bool,
    pub anneal_midpoint_epochs: f64,
    pub anneal_width_epochs: f64,
    /// Word-dropout ramp for non-WAE modes. Unset: on for VAE modes only.
    pub word_dropout: Option<bool>,
    /// IMQ constant; unset means `2 · latent_dim`.
    pub kernel_c: Option<f64>,
    /// Coefficient of the MMD cross term (2 unbiased, 1 printed variant).
    pub cross_factor: f64,
    /// Training corpus; when unset a synthetic corpus of `synth_sentences`
    /// sentences is generated from `seed`.
    pub corpus: Option<PathBuf>,
    pub synth_sentences: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dae,
            seed: 0,
            embed_dim: 32,
            hidden_dim: 64,
            latent_dim: 16,
            vocab_size: 1000,
            max_len: 20,
            batch_size: 32,
            epochs: 20,
            lr: 0.001,
            lr_decay: 0.98,
            lr_min: 1e-5,
            clip_norm: 5.0,
            lambda_vae: 1.0,
            lambda_wae: 10.0,
            lambda_kl: 0.0,
            anneal: true,
            anneal_midpoint_epochs: 3.0,
            anneal_width_epochs: 2.0,
            word_dropout: None,
            kernel_c: None,
            cross_factor: 2.0,
            corpus: None,
            synth_sentences: 2000,
            checkpoint: None,
            log: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" || v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "lambda_vae" => self.lambda_vae = parse(key, v)?,
            "lambda_wae" => self.lambda_wae = parse(key, v)?,
            "lambda_kl" => self.lambda_kl = parse(key, v)?,
            "anneal" => self.anneal = parse_bool(key, v)?,
            "anneal_midpoint_epochs" => self.anneal_midpoint_epochs = parse(key, v)?,
            "anneal_width_epochs" => self.anneal_width_epochs = parse(key, v)?,
            "word_dropout" => {
                self.word_dropout = if v == "auto" {
                    None
                } else {
                    Some(parse_bool(key, v)?)
                }
            }
            "kernel_c" => self.kernel_c = parse_opt(key, v)?,
            "cross_factor" => self.cross_factor = parse(key, v)?,
            "corpus" => self.corpus = parse_opt(key, v)?,
            "synth_sentences" => self.synth_sentences = parse(key, v)?,
            "checkpoint" => self.checkpoint = parse_opt(key, v)?,
            "log" => self.log = parse_opt(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. `seed` is required.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut has_seed = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            has_seed |= k.trim() == "seed";
        }
        if !has_seed {
            return Err(Error::Config("seed is required".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let opt = |o: &Option<PathBuf>| {
            o.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "auto".into())
        };
        let lines = [
            format!("mode = {}", self.mode),
            format!("seed = {}", self.seed),
            format!("embed_dim = {}", self.embed_dim),
            format!("hidden_dim = {}", self.hidden_dim),
            format!("latent_dim = {}", self.latent_dim),
            format!("vocab_size = {}", self.vocab_size),
            format!("max_len = {}", self.max_len),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("lr = {}", self.lr),
            format!("lr_decay = {}", self.lr_decay),
            format!("lr_min = {}", self.lr_min),
            format!("clip_norm = {}", self.clip_norm),
            format!("lambda_vae = {}", self.lambda_vae),
            format!("lambda_wae = {}", self.lambda_wae),
            format!("lambda_kl = {}", self.lambda_kl),
            format!("anneal = {}", self.anneal),
            format!("anneal_midpoint_epochs = {}", self.anneal_midpoint_epochs),
            format!("anneal_width_epochs = {}", self.anneal_width_epochs),
            format!(
                "word_dropout = {}",
                self.word_dropout.map_or("auto".to_string(), |b| b.to_string())
            ),
            format!(
                "kernel_c = {}",
                self.kernel_c.map_or("auto".to_string(), |c| c.to_string())
            ),
            format!("cross_factor = {}", self.cross_factor),
            format!("corpus = {}", opt(&self.corpus)),
            format!("synth_sentences = {}", self.synth_sentences),
            format!("checkpoint = {}", opt(&self.checkpoint)),
            format!("log = {}", opt(&self.log)),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_vae", self.lambda_vae),
            ("lambda_wae", self.lambda_wae),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must be at least 5".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.cross_factor != 1.0 && self.cross_factor != 2.0 {
            return Err(Error::Config(format!(
                "cross_factor must be 1 or 2, got {}",
                self.cross_factor
            )));
        }
        if let Some(c) = self.kernel_c {
            KernelConfig::new(c)?;
        }
        if self.mode.is_wae() && self.word_dropout == Some(true) {
            return Err(Error::Config(format!(
                "{} trains without word dropout; remove word_dropout = true",
                self.mode
            )));
        }
        if self.corpus.is_none() && self.mode.is_dialog() {
            return Err(Error::Config(format!(
                "{} needs a paired corpus (corpus = path)",
                self.mode
            )));
        }
        if self.corpus.is_none() && self.synth_sentences < 2 {
            return Err(Error::Config("synth_sentences must be at least 2".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            latent: self.latent_dim,
        }
    }

    pub fn kernel(&self) -> KernelConfig {
        self.kernel_c
            .map(|c| KernelConfig { c })
            .unwrap_or_else(|| KernelConfig::for_latent_dim(self.latent_dim))
    }

    /// Whether the word-dropout ramp runs; never for WAE modes.
    pub fn uses_word_dropout(&self) -> bool {
        !self.mode.is_wae() && self.word_dropout.unwrap_or(self.mode.is_vae())
    }

    /// Whether the sigmoid KL schedule (with peaking stop) runs.
    pub fn uses_annealing(&self) -> bool {
        self.mode.is_vae() && self.anneal
    }

    /// Loss for this mode at KL weight `lambda_vae_now`.
    pub fn objective(&self, lambda_vae_now: f64) -> Objective {
        match self.mode {
            Mode::Dae | Mode::Ded => Objective::Dae,
            Mode::Vae | Mode::Ved => Objective::Vae {
                lambda: lambda_vae_now,
            },
            Mode::WaeD | Mode::WedD => Objective::WaeD {
                lambda_wae: self.lambda_wae,
            },
            Mode::WaeS | Mode::WedS => Objective::WaeS {
                lambda_wae: self.lambda_wae,
                lambda_kl: self.lambda_kl,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig {
            mode: Mode::WedS,
            seed: 7,
            lambda_kl: 0.01,
            kernel_c: Some(3.5),
            corpus: Some("data/pairs.tsv".into()),
            ..TrainConfig::default()
        };
        c.word_dropout = Some(false);
        let back = TrainConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::parse_text("# run\nmode = vae  # annealed\nseed=3\n").unwrap();
        assert_eq!((c.mode, c.seed), (Mode::Vae, 3));
        assert!(TrainConfig::parse_text("mode = vae\n").is_err(), "seed required");
        let e = TrainConfig::parse_text("seed = 1\nmode = gan\n").unwrap_err();
        assert!(e.to_string().contains("invalid mode"));
        assert!(TrainConfig::parse_text("seed = 1\nfoo = 2\n").is_err());
        let neg = TrainConfig::parse_text("seed = 1\nlambda_wae = -1\n").unwrap();
        assert!(neg.validate().unwrap_err().to_string().contains("lambda_wae"));
    }

    #[test]
    fn wae_never_uses_dropout_or_annealing() {
        for mode in Mode::ALL.into_iter().filter(|m| m.is_wae()) {
            let c = TrainConfig {
                mode,
                anneal: true,
                ..TrainConfig::default()
            };
            assert!(!c.uses_word_dropout());
            assert!(!c.uses_annealing());
            let bad = TrainConfig {
                word_dropout: Some(true),
                corpus: Some("x".into()),
                ..c
            };
            assert!(bad.validate().is_err());
        }
        let vae = TrainConfig {
            mode: Mode::Vae,
            ..TrainConfig::default()
        };
        assert!(vae.uses_word_dropout() && vae.uses_annealing());
    }
}
