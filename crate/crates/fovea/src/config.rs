//! `RunConfig`: every tunable of a run, read from a sectioned key=value file
//! with command-line overrides, and written back in one canonical form whose
//! SHA-256 identifies the run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use fovea_core::env::EnvConfig;
use fovea_core::models::BackboneConfig;
use fovea_core::synth::GlyphConfig;
use fovea_core::trainer::{Optimizer, PretrainConfig, TrainConfig, TrainMode};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pixel budget of the Random and Center baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    /// Match the mean pixel fraction DRIFT reaches on the same split.
    Matched,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds initialisation, training and the stochastic baselines.
    pub seed: u64,
    /// Seeds the dataset alone, so runs with different seeds share data.
    pub data_seed: u64,
    pub mode: TrainMode,
    pub policy: String,
    pub address: String,
    pub data: GlyphConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub n_val: usize,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub budget: Budget,
    pub fallback_fraction: f64,
}

impl Default for RunConfig {
    /// The desk preset: reference constants where they carry over, Adam and
    /// larger steps where SGD at 1e-4 would need far longer runs.
    fn default() -> Self {
        let mut train = TrainConfig {
            epochs: 30,
            freeze_epochs: 25,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            finetune_lr: 1e-3,
            tau: 1e-2,
            warmup: 500,
            optimizer: Optimizer::Adam,
            ..TrainConfig::default()
        };
        train.env = EnvConfig::default();
        Self {
            seed: 0,
            data_seed: 0,
            mode: TrainMode::Full,
            policy: "all".into(),
            address: "127.0.0.1:7878".into(),
            data: GlyphConfig::default(),
            n_train: 5000,
            n_test: 1000,
            n_val: 500,
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig { epochs: 6, lr: 0.1, ..PretrainConfig::default() },
            train,
            budget: Budget::Matched,
            fallback_fraction: 0.25,
        }
    }
}

pub const SECTIONS: [&str; 7] = ["run", "data", "model", "env", "pretrain", "train", "eval"];

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{v}`")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got `{v}`"))),
    }
}

impl RunConfig {
    /// `(section, key, value)` in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let e = &t.env;
        let p = &self.pretrain;
        let b = &self.backbone;
        let mut v: Vec<(&'static str, &'static str, String)> = Vec::new();
        let mut put = |s: &'static str, k: &'static str, val: String| v.push((s, k, val));
        put("run", "seed", self.seed.to_string());
        put("run", "mode", self.mode.name().into());
        put("run", "policy", self.policy.clone());
        put("run", "address", self.address.clone());
        put("data", "seed", self.data_seed.to_string());
        put("data", "image_size", d.image_size.to_string());
        put("data", "thumb_size", d.thumb_size.to_string());
        put("data", "classes", d.classes.to_string());
        put("data", "distractors", d.distractors.to_string());
        put("data", "distractor_pool", d.distractor_pool.to_string());
        put("data", "disc_radius", d.disc_radius.to_string());
        put("data", "class_disc_level", d.class_disc_level.to_string());
        put("data", "distractor_disc_level", d.distractor_disc_level.to_string());
        put("data", "ink_level", d.ink_level.to_string());
        put("data", "hue_groups", d.hue_groups.to_string());
        put("data", "hue_strength", d.hue_strength.to_string());
        put("data", "gt_margin", d.gt_margin.to_string());
        put("data", "background_low", d.background_low.to_string());
        put("data", "background_high", d.background_high.to_string());
        put("data", "placement_retries", d.placement_retries.to_string());
        put("data", "n_train", self.n_train.to_string());
        put("data", "n_test", self.n_test.to_string());
        put("data", "n_val", self.n_val.to_string());
        put("model", "channels", format!("{},{},{}", b.channels[0], b.channels[1], b.channels[2]));
        put("model", "coords", b.coords.to_string());
        put("model", "actor_hidden", t.actor_hidden.to_string());
        put("model", "critic_hidden", t.critic_hidden.to_string());
        put("env", "steps", e.steps.to_string());
        put("env", "lambda", e.lambda.to_string());
        put("env", "threshold", e.threshold.to_string());
        put("env", "gamma", e.gamma.to_string());
        put("env", "b1", e.b1.to_string());
        put("env", "b2", e.b2.to_string());
        put("pretrain", "epochs", p.epochs.to_string());
        put("pretrain", "batch", p.batch.to_string());
        put("pretrain", "lr", p.lr.to_string());
        put("pretrain", "lr_decay", p.lr_decay.to_string());
        put("pretrain", "decay_every", p.decay_every.to_string());
        put("train", "epochs", t.epochs.to_string());
        put("train", "freeze_epochs", t.freeze_epochs.to_string());
        put("train", "episodes_per_epoch", t.episodes_per_epoch.to_string());
        put("train", "batch", t.batch.to_string());
        put("train", "optimizer", t.optimizer.name().into());
        put("train", "actor_lr", t.actor_lr.to_string());
        put("train", "critic_lr", t.critic_lr.to_string());
        put("train", "finetune_lr", t.finetune_lr.to_string());
        put("train", "tau", t.tau.to_string());
        put("train", "eps0", t.eps0.to_string());
        put("train", "eps_decay", t.eps_decay.to_string());
        put("train", "eps_period", t.eps_period.to_string());
        put("train", "warmup", t.warmup.to_string());
        put("train", "buffer", t.buffer.to_string());
        put("train", "ou_theta", t.ou_theta.to_string());
        put("train", "ou_sigma", t.ou_sigma.to_string());
        put("train", "ou_sigma_decay", t.ou_sigma_decay.to_string());
        put(
            "eval",
            "budget",
            match self.budget {
                Budget::Matched => "matched".into(),
                Budget::Fixed(b) => b.to_string(),
            },
        );
        put("eval", "fallback_fraction", self.fallback_fraction.to_string());
        v
    }

    /// Sets one key. Unknown sections and keys are errors.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        let d = &mut self.data;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match (s, key) {
            ("run", "seed") => self.seed = parse(s, key, v)?,
            ("run", "mode") => self.mode = TrainMode::parse(v.trim()).map_err(|e| Error::Config(format!("[run] mode: {e}")))?,
            ("run", "policy") => self.policy = v.trim().to_string(),
            ("run", "address") => self.address = v.trim().to_string(),
            ("data", "seed") => self.data_seed = parse(s, key, v)?,
            ("data", "image_size") => d.image_size = parse(s, key, v)?,
            ("data", "thumb_size") => d.thumb_size = parse(s, key, v)?,
            ("data", "classes") => d.classes = parse(s, key, v)?,
            ("data", "distractors") => d.distractors = parse(s, key, v)?,
            ("data", "distractor_pool") => d.distractor_pool = parse(s, key, v)?,
            ("data", "disc_radius") => d.disc_radius = parse(s, key, v)?,
            ("data", "class_disc_level") => d.class_disc_level = parse(s, key, v)?,
            ("data", "distractor_disc_level") => d.distractor_disc_level = parse(s, key, v)?,
            ("data", "ink_level") => d.ink_level = parse(s, key, v)?,
            ("data", "hue_groups") => d.hue_groups = parse(s, key, v)?,
            ("data", "hue_strength") => d.hue_strength = parse(s, key, v)?,
            ("data", "gt_margin") => d.gt_margin = parse(s, key, v)?,
            ("data", "background_low") => d.background_low = parse(s, key, v)?,
            ("data", "background_high") => d.background_high = parse(s, key, v)?,
            ("data", "placement_retries") => d.placement_retries = parse(s, key, v)?,
            ("data", "n_train") => self.n_train = parse(s, key, v)?,
            ("data", "n_test") => self.n_test = parse(s, key, v)?,
            ("data", "n_val") => self.n_val = parse(s, key, v)?,
            ("model", "channels") => {
                let c: Vec<usize> = v.split(',').map(|x| parse(s, key, x)).collect::<Result<_>>()?;
                self.backbone.channels = c.try_into().map_err(|_| Error::Config("[model] channels: expected three comma-separated widths".into()))?;
            }
            ("model", "coords") => self.backbone.coords = parse_bool(s, key, v)?,
            ("model", "actor_hidden") => t.actor_hidden = parse(s, key, v)?,
            ("model", "critic_hidden") => t.critic_hidden = parse(s, key, v)?,
            ("env", "steps") => t.env.steps = parse(s, key, v)?,
            ("env", "lambda") => t.env.lambda = parse(s, key, v)?,
            ("env", "threshold") => t.env.threshold = parse(s, key, v)?,
            ("env", "gamma") => t.env.gamma = parse(s, key, v)?,
            ("env", "b1") => t.env.b1 = parse(s, key, v)?,
            ("env", "b2") => t.env.b2 = parse(s, key, v)?,
            ("pretrain", "epochs") => p.epochs = parse(s, key, v)?,
            ("pretrain", "batch") => p.batch = parse(s, key, v)?,
            ("pretrain", "lr") => p.lr = parse(s, key, v)?,
            ("pretrain", "lr_decay") => p.lr_decay = parse(s, key, v)?,
            ("pretrain", "decay_every") => p.decay_every = parse(s, key, v)?,
            ("train", "epochs") => t.epochs = parse(s, key, v)?,
            ("train", "freeze_epochs") => t.freeze_epochs = parse(s, key, v)?,
            ("train", "episodes_per_epoch") => t.episodes_per_epoch = parse(s, key, v)?,
            ("train", "batch") => t.batch = parse(s, key, v)?,
            ("train", "optimizer") => t.optimizer = Optimizer::parse(v.trim()).map_err(|e| Error::Config(format!("[train] optimizer: {e}")))?,
            ("train", "actor_lr") => t.actor_lr = parse(s, key, v)?,
            ("train", "critic_lr") => t.critic_lr = parse(s, key, v)?,
            ("train", "finetune_lr") => t.finetune_lr = parse(s, key, v)?,
            ("train", "tau") => t.tau = parse(s, key, v)?,
            ("train", "eps0") => t.eps0 = parse(s, key, v)?,
            ("train", "eps_decay") => t.eps_decay = parse(s, key, v)?,
            ("train", "eps_period") => t.eps_period = parse(s, key, v)?,
            ("train", "warmup") => t.warmup = parse(s, key, v)?,
            ("train", "buffer") => t.buffer = parse(s, key, v)?,
            ("train", "ou_theta") => t.ou_theta = parse(s, key, v)?,
            ("train", "ou_sigma") => t.ou_sigma = parse(s, key, v)?,
            ("train", "ou_sigma_decay") => t.ou_sigma_decay = parse(s, key, v)?,
            ("eval", "budget") => {
                self.budget = match v.trim() {
                    "matched" => Budget::Matched,
                    x => Budget::Fixed(parse(s, key, x)?),
                }
            }
            ("eval", "fallback_fraction") => self.fallback_fraction = parse(s, key, v)?,
            _ if !SECTIONS.contains(&s) => return Err(Error::Config(format!("unknown section [{s}]"))),
            _ => return Err(Error::Config(format!("unknown key `{key}` in [{s}]"))),
        }
        self.sync();
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<()> {
        let (lhs, v) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("expected section.key=value, got `{assignment}`")))?;
        let (s, k) = lhs.trim().split_once('.').ok_or_else(|| Error::Config(format!("expected section.key, got `{lhs}`")))?;
        self.set(s, k, v)
    }

    /// Keeps the duplicated thumbnail size in step.
    fn sync(&mut self) {
        self.train.env.thumb_size = self.data.thumb_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.n_train < 2 || self.n_test == 0 {
            return Err(Error::Config("[data] need n_train >= 2 and n_test >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fallback_fraction) {
            return Err(Error::Config("[eval] fallback_fraction must lie in [0, 1]".into()));
        }
        if let Budget::Fixed(b) = self.budget {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config("[eval] budget must be `matched` or a fraction in [0, 1]".into()));
            }
        }
        if self.backbone.channels.contains(&0) {
            return Err(Error::Config("[model] channels must be positive".into()));
        }
        Ok(())
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                cfg.set(section, k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    /// Canonical text form. Parsing it back gives an equal config.
    pub fn to_ini_string(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (s, k, v) in self.entries() {
            if s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                current = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn section_text(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        for (s, k, v) in self.entries() {
            if sections.contains(&s) {
                let _ = writeln!(out, "{s}.{k}={v}");
            }
        }
        out
    }

    /// Hash of the whole canonical config.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_ini_string().as_bytes())
    }

    /// Hash of what determines the images: the `[data]` section.
    pub fn data_hash(&self) -> String {
        sha256_hex(self.section_text(&["data"]).as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.budget = Budget::Fixed(0.15);
        c.train.tau = 1e-4;
        let back = RunConfig::from_ini_str(&c.to_ini_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(matches!(RunConfig::from_ini_str("[train]\nepochz = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_ini_str("[trainer]\nepochs = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_ini_str("epochs = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_ini_str("[train]\nepochs = three\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_files_override_defaults_only_where_given() {
        let c = RunConfig::from_ini_str("# desk run\n[env]\nlambda = 2.5\n\n[model]\nchannels = 8,16,32\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(c.train.env.lambda, 2.5);
        assert_eq!(c.backbone.channels, [8, 16, 32]);
        assert_eq!(c.train.epochs, d.train.epochs);
    }

    #[test]
    fn data_hash_ignores_training_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.actor_lr = 0.5;
        assert_eq!(a.data_hash(), b.data_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_eq!(a.data_hash(), b.data_hash());
        b.data_seed = 1;
        assert_ne!(a.data_hash(), b.data_hash());
    }

    #[test]
    fn thumb_size_is_shared_with_the_env() {
        let mut c = RunConfig::default();
        c.set_dotted("data.thumb_size=16").unwrap();
        assert_eq!(c.train.env.thumb_size, 16);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
