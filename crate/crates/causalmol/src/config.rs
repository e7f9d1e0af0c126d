//! Flat key/value run configuration with strict unknown-key rejection and a
//! stable digest stamped into every output artifact.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::causal::MaskConfig;
use crate::model::{Ablation, ModelConfig};
use crate::objective::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`, got `{text}`")]
    Syntax { path: String, line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Everything one run needs. Defaults mirror the experiment table:
/// 3 GIN layers, feature width 64, alpha1 0.1, alpha2 0.01, inner lr 0.05,
/// outer lr 0.001, batch of 8 episodes; epochs default to the desk-scale 300.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub encoder_layers: usize,
    pub context_layers: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_episodes: usize,
    pub inner_steps: usize,
    pub epochs: usize,
    pub first_order: bool,
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau: f64,
    pub tau_decay: f64,
    pub tau_anneal_every: usize,
    pub tau_floor: f64,
    pub pool_size: usize,
    pub context_aux: bool,
    pub ablation: Ablation,
    pub explanation_ratio: f64,
    pub checkpoint_every: usize,
    pub eval_episodes_per_task: usize,
    pub threads: usize,
    pub outer_optimizer: crate::meta::OuterOptimizer,
    pub weight_decay: f64,
    /// Adaptation steps at evaluation; more than the single training step is
    /// standard for gradient-based meta-learning.
    pub eval_inner_steps: usize,
    /// Outer meta-gradient norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dim: 64,
            encoder_layers: 3,
            context_layers: 3,
            k_shot: 5,
            query_per_class: 16,
            inner_lr: 0.05,
            outer_lr: 0.001,
            batch_episodes: 8,
            inner_steps: 1,
            epochs: 300,
            first_order: true,
            alpha1: 0.1,
            alpha2: 0.01,
            tau: 1.0,
            tau_decay: 0.97,
            tau_anneal_every: 100,
            tau_floor: 0.1,
            pool_size: 16,
            context_aux: true,
            ablation: Ablation::None,
            explanation_ratio: 0.5,
            checkpoint_every: 100,
            eval_episodes_per_task: 20,
            threads: 1,
            outer_optimizer: crate::meta::OuterOptimizer::Adam,
            weight_decay: 1e-5,
            eval_inner_steps: 5,
            grad_clip: 5.0,
        }
    }
}

impl RunConfig {
    pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        RunConfig::parse_text(&text, &path.display().to_string())
    }

    pub fn parse_text(text: &str, path: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: path.to_string(),
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(
            key: &str,
            value: &str,
            ty: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                ty,
            })
        }
        match key {
            "seed" => self.seed = parse(key, value, "u64")?,
            "dim" => self.dim = parse(key, value, "usize")?,
            "encoder_layers" => self.encoder_layers = parse(key, value, "usize")?,
            "context_layers" => self.context_layers = parse(key, value, "usize")?,
            "k_shot" => self.k_shot = parse(key, value, "usize")?,
            "query_per_class" => self.query_per_class = parse(key, value, "usize")?,
            "inner_lr" => self.inner_lr = parse(key, value, "f64")?,
            "outer_lr" => self.outer_lr = parse(key, value, "f64")?,
            "batch_episodes" => self.batch_episodes = parse(key, value, "usize")?,
            "inner_steps" => self.inner_steps = parse(key, value, "usize")?,
            "epochs" => self.epochs = parse(key, value, "usize")?,
            "first_order" => self.first_order = parse(key, value, "bool")?,
            "alpha1" => self.alpha1 = parse(key, value, "f64")?,
            "alpha2" => self.alpha2 = parse(key, value, "f64")?,
            "tau" => self.tau = parse(key, value, "f64")?,
            "tau_decay" => self.tau_decay = parse(key, value, "f64")?,
            "tau_anneal_every" => self.tau_anneal_every = parse(key, value, "usize")?,
            "tau_floor" => self.tau_floor = parse(key, value, "f64")?,
            "pool_size" => self.pool_size = parse(key, value, "usize")?,
            "context_aux" => self.context_aux = parse(key, value, "bool")?,
            "ablation" => {
                self.ablation = match value {
                    "none" => Ablation::None,
                    "no_causality" => Ablation::NoCausality,
                    "no_context" => Ablation::NoContext,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            ty: "none|no_causality|no_context",
                        })
                    }
                }
            }
            "explanation_ratio" => self.explanation_ratio = parse(key, value, "f64")?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value, "usize")?,
            "eval_episodes_per_task" => {
                self.eval_episodes_per_task = parse(key, value, "usize")?
            }
            "threads" => self.threads = parse(key, value, "usize")?,
            "outer_optimizer" => {
                self.outer_optimizer = match value {
                    "sgd" => crate::meta::OuterOptimizer::Sgd,
                    "adam" => crate::meta::OuterOptimizer::Adam,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            ty: "sgd|adam",
                        })
                    }
                }
            }
            "weight_decay" => self.weight_decay = parse(key, value, "f64")?,
            "eval_inner_steps" => self.eval_inner_steps = parse(key, value, "usize")?,
            "grad_clip" => self.grad_clip = parse(key, value, "f64")?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.inner_lr <= 0.0 || self.outer_lr <= 0.0 {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        if self.batch_episodes == 0 {
            return Err(ConfigError::Invalid("batch_episodes must be >= 1".into()));
        }
        if self.tau <= 0.0 || self.tau_floor <= 0.0 {
            return Err(ConfigError::Invalid("temperatures must be positive".into()));
        }
        if !self.first_order && self.inner_steps != 1 {
            return Err(ConfigError::Invalid(
                "second-order mode supports exactly one inner step".into(),
            ));
        }
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be >= 1".into()));
        }
        Ok(())
    }

    fn canonical_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("dim", self.dim.to_string());
        m.insert("encoder_layers", self.encoder_layers.to_string());
        m.insert("context_layers", self.context_layers.to_string());
        m.insert("k_shot", self.k_shot.to_string());
        m.insert("query_per_class", self.query_per_class.to_string());
        m.insert("inner_lr", format!("{:e}", self.inner_lr));
        m.insert("outer_lr", format!("{:e}", self.outer_lr));
        m.insert("batch_episodes", self.batch_episodes.to_string());
        m.insert("inner_steps", self.inner_steps.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("first_order", self.first_order.to_string());
        m.insert("alpha1", format!("{:e}", self.alpha1));
        m.insert("alpha2", format!("{:e}", self.alpha2));
        m.insert("tau", format!("{:e}", self.tau));
        m.insert("tau_decay", format!("{:e}", self.tau_decay));
        m.insert("tau_anneal_every", self.tau_anneal_every.to_string());
        m.insert("tau_floor", format!("{:e}", self.tau_floor));
        m.insert("pool_size", self.pool_size.to_string());
        m.insert("context_aux", self.context_aux.to_string());
        m.insert(
            "ablation",
            match self.ablation {
                Ablation::None => "none",
                Ablation::NoCausality => "no_causality",
                Ablation::NoContext => "no_context",
            }
            .to_string(),
        );
        m.insert("explanation_ratio", format!("{:e}", self.explanation_ratio));
        m.insert("checkpoint_every", self.checkpoint_every.to_string());
        m.insert("eval_episodes_per_task", self.eval_episodes_per_task.to_string());
        m.insert("threads", self.threads.to_string());
        m.insert(
            "outer_optimizer",
            match self.outer_optimizer {
                crate::meta::OuterOptimizer::Sgd => "sgd",
                crate::meta::OuterOptimizer::Adam => "adam",
            }
            .to_string(),
        );
        m.insert("weight_decay", format!("{:e}", self.weight_decay));
        m.insert("eval_inner_steps", self.eval_inner_steps.to_string());
        m.insert("grad_clip", format!("{:e}", self.grad_clip));
        m
    }

    /// Stable hash of the normalized key/value pairs.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.canonical_pairs() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let out = hasher.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mask_config(&self, hard_eval: bool) -> MaskConfig {
        MaskConfig {
            tau: self.tau,
            tau_decay: self.tau_decay,
            anneal_every: self.tau_anneal_every,
            tau_floor: self.tau_floor,
            hard_eval,
        }
    }

    pub fn model_config(&self, num_properties: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            encoder_layers: self.encoder_layers,
            context_layers: self.context_layers,
            num_properties,
            ablation: self.ablation,
            weights: LossWeights { alpha1: self.alpha1, alpha2: self.alpha2 },
            mask: self.mask_config(false),
            pool_size: self.pool_size,
            context_aux: self.context_aux,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_experiment_table() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.dim, 64);
        assert_eq!(cfg.encoder_layers, 3);
        assert_eq!(cfg.context_layers, 3);
        assert_eq!(cfg.alpha1, 0.1);
        assert_eq!(cfg.alpha2, 0.01);
        assert_eq!(cfg.inner_lr, 0.05);
        assert_eq!(cfg.outer_lr, 0.001);
        assert_eq!(cfg.batch_episodes, 8);
    }

    #[test]
    fn parse_and_digest_stability() {
        let a = RunConfig::parse_text("seed = 7\ndim = 16\n# comment\nalpha1 = 0.2\n", "t").unwrap();
        assert_eq!(a.seed, 7);
        assert_eq!(a.dim, 16);
        assert_eq!(a.alpha1, 0.2);
        let b = RunConfig::parse_text("alpha1 = 0.2\nseed=7\ndim=16", "t").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::parse_text("seed = 8\ndim = 16\nalpha1 = 0.2", "t").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse_text("learning_rate = 0.1", "t").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn bad_value_and_syntax_rejected() {
        assert!(matches!(
            RunConfig::parse_text("dim = banana", "t").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            RunConfig::parse_text("dim 16", "t").unwrap_err(),
            ConfigError::Syntax { .. }
        ));
    }

    #[test]
    fn second_order_requires_single_inner_step() {
        assert!(RunConfig::parse_text("first_order = false\ninner_steps = 2", "t").is_err());
        assert!(RunConfig::parse_text("first_order = false\ninner_steps = 1", "t").is_ok());
    }
}
