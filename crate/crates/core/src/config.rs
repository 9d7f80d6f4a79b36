//! Experiment configuration: a flat `key = value` text format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key is listed in [`ExperimentConfig::to_pairs`], and the
//! same keys are accepted by `--set key=value` on the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::checksum::Fnv1a;
use crate::datagen::{self, DomainDataset, GenSpec};
use crate::dsp::PromptMode;
use crate::encoder::{EncoderConfig, FrozenEncoders, TokenTable};
use crate::error::{Error, Result};
use crate::evalhub::ZPolicy;
use crate::fed::aggregate::MomentumRule;
use crate::fed::FedConfig;
use crate::numcore::{OptimizerKind, OptimizerSettings};

/// One complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Load this dataset instead of generating one.
    pub dataset: Option<PathBuf>,
    pub data: GenSpec,
    pub clients: usize,
    pub overlap: f64,
    pub fed: FedConfig,
    pub d: usize,
    pub d_tok: usize,
    pub encoder_hidden: usize,
    pub encoder_seed: u64,
    pub z_policy: ZPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::AdamW => "adamw",
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Fast desk-scale preset.
    pub fn desk() -> Self {
        ExperimentConfig {
            dataset: None,
            data: GenSpec::default(),
            clients: 3,
            overlap: 0.0,
            fed: FedConfig {
                epochs: 30,
                gan_epochs: 60,
                stage1: OptimizerSettings::adam(0.3),
                stage2: OptimizerSettings::adamw(1e-2, 2e-5),
                ..FedConfig::default()
            },
            d: 32,
            d_tok: 32,
            encoder_hidden: 64,
            encoder_seed: 0,
            z_policy: ZPolicy::default(),
        }
    }

    /// The desk preset with the published epoch counts and learning rates.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.fed.epochs = 100;
        c.fed.gan_epochs = 100;
        c.fed.stage1 = OptimizerSettings::adam(1e-5);
        c.fed.stage2 = OptimizerSettings::adamw(1e-4, 2e-5);
        c
    }

    /// Sets data, model and noise seeds at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.set_seed(seed);
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.fed.seed = seed;
        self.set_noise_seed(seed);
    }

    pub fn seed(&self) -> u64 {
        self.fed.seed
    }

    fn noise_seed(&self) -> u64 {
        match self.z_policy {
            ZPolicy::FixedZero => 0,
            ZPolicy::Seeded { seed } | ZPolicy::MeanOf { seed, .. } => seed,
        }
    }

    fn set_noise_seed(&mut self, s: u64) {
        match &mut self.z_policy {
            ZPolicy::FixedZero => {}
            ZPolicy::Seeded { seed } | ZPolicy::MeanOf { seed, .. } => *seed = s,
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let f = &self.fed;
        let (zp, zs) = match self.z_policy {
            ZPolicy::FixedZero => ("fixed-zero", 1),
            ZPolicy::Seeded { .. } => ("seeded", 1),
            ZPolicy::MeanOf { samples, .. } => ("mean", samples),
        };
        vec![
            (
                "dataset",
                self.dataset
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("classes", self.data.classes.to_string()),
            ("domains", self.data.domains.to_string()),
            ("shots", self.data.shots.to_string()),
            ("feature-dim", self.data.feature_dim.to_string()),
            ("shift", self.data.shift_strength.to_string()),
            ("data-seed", self.data.seed.to_string()),
            ("clients", self.clients.to_string()),
            ("overlap", self.overlap.to_string()),
            ("prompt-mode", f.mode.to_string()),
            ("m1", f.m1.to_string()),
            ("m2", f.m2.to_string()),
            ("tau", f.tau.to_string()),
            ("alpha", f.alpha.to_string()),
            (
                "momentum-rule",
                match f.momentum_rule {
                    MomentumRule::Ema => "ema".into(),
                    MomentumRule::TwoHistory => "two-history".into(),
                },
            ),
            ("epochs", f.epochs.to_string()),
            ("gan-epochs", f.gan_epochs.to_string()),
            ("epochs-per-round", f.epochs_per_round.to_string()),
            ("batch-size", f.batch_size.to_string()),
            ("stage1-optimizer", optimizer_name(f.stage1.kind).into()),
            ("stage1-lr", f.stage1.lr.to_string()),
            ("stage1-weight-decay", f.stage1.weight_decay.to_string()),
            ("stage2-optimizer", optimizer_name(f.stage2.kind).into()),
            ("stage2-lr", f.stage2.lr.to_string()),
            ("stage2-weight-decay", f.stage2.weight_decay.to_string()),
            ("z-dim", f.gan.z_dim.to_string()),
            ("gan-hidden", f.gan.hidden.to_string()),
            ("d-steps", f.gan.d_steps.to_string()),
            ("saturating-g", f.gan.saturating.to_string()),
            ("model-seed", f.seed.to_string()),
            ("d", self.d.to_string()),
            ("d-tok", self.d_tok.to_string()),
            ("encoder-hidden", self.encoder_hidden.to_string()),
            ("encoder-seed", self.encoder_seed.to_string()),
            ("z-policy", zp.into()),
            ("z-samples", zs.to_string()),
            ("noise-seed", self.noise_seed().to_string()),
        ]
    }

    /// Sets one key. `seed` is accepted as shorthand for all three seeds.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = &mut self.fed;
        match key.trim() {
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "classes" => self.data.classes = parse(key, v)?,
            "domains" => self.data.domains = parse(key, v)?,
            "shots" => self.data.shots = parse(key, v)?,
            "feature-dim" => self.data.feature_dim = parse(key, v)?,
            "shift" => self.data.shift_strength = parse(key, v)?,
            "data-seed" => self.data.seed = parse(key, v)?,
            "clients" => self.clients = parse(key, v)?,
            "overlap" => self.overlap = parse(key, v)?,
            "prompt-mode" => f.mode = v.parse()?,
            "m1" => f.m1 = parse(key, v)?,
            "m2" => f.m2 = parse(key, v)?,
            "tau" => f.tau = parse(key, v)?,
            "alpha" => f.alpha = parse(key, v)?,
            "momentum-rule" => {
                f.momentum_rule = match v {
                    "ema" => MomentumRule::Ema,
                    "two-history" => MomentumRule::TwoHistory,
                    _ => return Err(Error::Config(format!("unknown momentum rule {v:?}"))),
                }
            }
            "epochs" => f.epochs = parse(key, v)?,
            "gan-epochs" => f.gan_epochs = parse(key, v)?,
            "epochs-per-round" => f.epochs_per_round = parse(key, v)?,
            "batch-size" => f.batch_size = parse(key, v)?,
            "stage1-optimizer" => f.stage1.kind = parse_optimizer(key, v)?,
            "stage1-lr" => f.stage1.lr = parse(key, v)?,
            "stage1-weight-decay" => f.stage1.weight_decay = parse(key, v)?,
            "stage2-optimizer" => f.stage2.kind = parse_optimizer(key, v)?,
            "stage2-lr" => f.stage2.lr = parse(key, v)?,
            "stage2-weight-decay" => f.stage2.weight_decay = parse(key, v)?,
            "z-dim" => f.gan.z_dim = parse(key, v)?,
            "gan-hidden" => f.gan.hidden = parse(key, v)?,
            "d-steps" => f.gan.d_steps = parse(key, v)?,
            "saturating-g" => f.gan.saturating = parse_bool(key, v)?,
            "model-seed" => f.seed = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "d-tok" => self.d_tok = parse(key, v)?,
            "encoder-hidden" => self.encoder_hidden = parse(key, v)?,
            "encoder-seed" => self.encoder_seed = parse(key, v)?,
            "z-policy" => {
                let seed = self.noise_seed();
                self.z_policy = match v {
                    "fixed-zero" => ZPolicy::FixedZero,
                    "seeded" => ZPolicy::Seeded { seed },
                    "mean" => ZPolicy::MeanOf { samples: 8, seed },
                    _ => return Err(Error::Config(format!("unknown z policy {v:?}"))),
                }
            }
            "z-samples" => {
                let n: usize = parse(key, v)?;
                if let ZPolicy::MeanOf { samples, .. } = &mut self.z_policy {
                    *samples = n;
                }
            }
            "noise-seed" => self.set_noise_seed(parse(key, v)?),
            "seed" => self.set_seed(parse(key, v)?),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::desk();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} outside [0, 1]",
                self.overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.fed.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.fed.alpha
            )));
        }
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.fed.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.fed.tau
            )));
        }
        if self.fed.mode != PromptMode::Hdp && self.fed.prompt_rows() == 0 {
            return Err(Error::Config("soft prompts need m1 + m2 > 0".into()));
        }
        crate::fed::Schedule::new(1, self.fed.epochs_per_round)?;
        Ok(())
    }

    /// The dataset this config describes.
    pub fn load_dataset(&self) -> Result<DomainDataset> {
        match &self.dataset {
            Some(p) => datagen::load_dataset(p),
            None => datagen::gen_dataset(&self.data),
        }
    }

    pub fn encoders(&self, feature_dim: usize) -> Result<FrozenEncoders> {
        FrozenEncoders::new(EncoderConfig {
            d: self.d,
            feature_dim,
            d_tok: self.d_tok,
            hidden: self.encoder_hidden,
            seed: self.encoder_seed,
        })
    }

    pub fn token_table(&self) -> TokenTable {
        TokenTable::new(self.encoder_seed, self.d_tok)
    }

    /// Fingerprint of the canonical config text and the dataset contents.
    pub fn hash(&self, dataset: &DomainDataset) -> String {
        let mut h = Fnv1a::new();
        for (k, v) in self.to_pairs() {
            if k == "dataset" {
                // The path is irrelevant once the contents are hashed.
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.update(&dataset.content_fingerprint().to_le_bytes());
        format!("{:016x}", h.finish())
    }
}

fn parse_optimizer(key: &str, v: &str) -> Result<OptimizerKind> {
    match v {
        "adam" => Ok(OptimizerKind::Adam),
        "adamw" => Ok(OptimizerKind::AdamW),
        _ => Err(Error::Config(format!("bad value {v:?} for {key}"))),
    }
}
