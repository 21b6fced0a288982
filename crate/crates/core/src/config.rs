//! Run configuration: a plain-text `key = value` file covering the model,
//! loss, optimizer, and evaluation knobs.
//!
//! Unknown and duplicate keys are rejected. `to_text` renders the canonical
//! form (every key, fixed order); its SHA-256 prefix is the config hash
//! reported everywhere a run needs to be reproduced.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FeatureSet, NetworkConfig, Pooling, Variant};
use crate::objective::{BatchCounts, DtwMode, LossHyper};
use crate::signal::RhoVariant;

/// How multi-template scores aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

/// Threshold selection convention inside the error-rate sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EerInterpolation {
    #[default]
    Midpoint,
    Linear,
}

/// Everything a training or evaluation run needs besides the dataset.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Global-norm gradient clip; `None` disables.
    pub clip_norm: Option<f64>,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    pub checkpoint_every: usize,
    pub counts: BatchCounts,
    pub net: NetworkConfig,
    pub loss: LossHyper,
    pub dtw: DtwMode,
    pub aggregation: Aggregation,
    pub interpolation: EerInterpolation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            epochs: 15,
            lr: 1e-3,
            clip_norm: Some(5.0),
            checkpoint_every: 0,
            counts: BatchCounts::default(),
            net: NetworkConfig::default(),
            loss: LossHyper::default(),
            dtw: DtwMode::Hard,
            aggregation: Aggregation::Mean,
            interpolation: EerInterpolation::Midpoint,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip_norm must be positive or none".into()));
            }
        }
        if let DtwMode::Soft { gamma } = self.dtw {
            if gamma <= 0.0 {
                return Err(Error::Config("soft_dtw_gamma must be positive".into()));
            }
        }
        self.net.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let clip = match self.clip_norm {
            Some(c) => c.to_string(),
            None => "none".into(),
        };
        let (dtw, soft_gamma) = match self.dtw {
            DtwMode::Hard => ("hard", 1.0),
            DtwMode::Soft { gamma } => ("soft", gamma),
        };
        format!(
            "seed = {}\n\
             epochs = {}\n\
             lr = {}\n\
             clip_norm = {}\n\
             checkpoint_every = {}\n\
             n_anchors = {}\n\
             n_positives = {}\n\
             n_skilled = {}\n\
             n_random = {}\n\
             hidden_dim = {}\n\
             n_blocks = {}\n\
             k_step = {}\n\
             k_nn = {}\n\
             pooling = {}\n\
             gru_post = {}\n\
             variant = {}\n\
             feature_set = {}\n\
             rho = {}\n\
             knn_symmetrize = {}\n\
             reset_edge_weights = {}\n\
             gamma1 = {}\n\
             gamma2 = {}\n\
             xi = {}\n\
             alpha = {}\n\
             beta = {}\n\
             random_forgery_weight = {}\n\
             normalize_loss_terms = {}\n\
             dtw = {}\n\
             soft_dtw_gamma = {}\n\
             score_aggregation = {}\n\
             eer_interpolation = {}\n",
            self.seed,
            self.epochs,
            self.lr,
            clip,
            self.checkpoint_every,
            self.counts.n_anchors,
            self.counts.n_positives,
            self.counts.n_skilled,
            self.counts.n_random,
            self.net.hidden_dim,
            self.net.n_blocks,
            self.net.k_step,
            self.net.k_nn,
            self.net.pooling,
            self.net.gru_post,
            self.net.variant,
            match self.net.feature_set {
                FeatureSet::Full16 => "16",
                FeatureSet::TimeFunctions12 => "12",
            },
            match self.net.rho_variant {
                RhoVariant::TangentAngle => "tangent_angle",
                RhoVariant::AngularRate => "angular_rate",
            },
            self.net.knn_symmetrize,
            self.net.reset_edge_weights,
            self.loss.gamma1,
            self.loss.gamma2,
            self.loss.xi,
            self.loss.alpha,
            self.loss.beta,
            self.loss.random_forgery_weight,
            self.loss.normalize_terms,
            dtw,
            soft_gamma,
            match self.aggregation {
                Aggregation::Mean => "mean",
                Aggregation::Min => "min",
            },
            match self.interpolation {
                EerInterpolation::Midpoint => "midpoint",
                EerInterpolation::Linear => "linear",
            },
        )
    }

    /// Hex-truncated SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Parses the `key = value` format. Missing keys keep their defaults.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut soft_gamma = 1.0f64;
    let mut dtw_soft = false;
    let mut seen = std::collections::HashSet::new();
    for (ix, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = ix + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {lineno}: expected `key = value`, got `{line}`"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
        }
        let bad = |what: &str| Error::Config(format!("line {lineno}: bad {what} `{value}`"));
        let parse_u64 = || value.parse::<u64>().map_err(|_| bad("integer"));
        let parse_usize = || value.parse::<usize>().map_err(|_| bad("integer"));
        let parse_f64 = || value.parse::<f64>().map_err(|_| bad("number"));
        let parse_bool = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("boolean")),
        };
        match key {
            "seed" => cfg.seed = parse_u64()?,
            "epochs" => cfg.epochs = parse_usize()?,
            "lr" => cfg.lr = parse_f64()?,
            "clip_norm" => {
                cfg.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_f64()?)
                }
            }
            "checkpoint_every" => cfg.checkpoint_every = parse_usize()?,
            "n_anchors" => cfg.counts.n_anchors = parse_usize()?,
            "n_positives" => cfg.counts.n_positives = parse_usize()?,
            "n_skilled" => cfg.counts.n_skilled = parse_usize()?,
            "n_random" => cfg.counts.n_random = parse_usize()?,
            "hidden_dim" => cfg.net.hidden_dim = parse_usize()?,
            "n_blocks" => cfg.net.n_blocks = parse_usize()?,
            "k_step" => cfg.net.k_step = parse_usize()?,
            "k_nn" => cfg.net.k_nn = parse_usize()?,
            "pooling" => cfg.net.pooling = value.parse::<Pooling>()?,
            "gru_post" => cfg.net.gru_post = parse_bool()?,
            "variant" => cfg.net.variant = value.parse::<Variant>()?,
            "feature_set" => {
                cfg.net.feature_set = match value {
                    "16" => FeatureSet::Full16,
                    "12" => FeatureSet::TimeFunctions12,
                    _ => return Err(bad("feature_set (16 or 12)")),
                }
            }
            "rho" => {
                cfg.net.rho_variant = match value {
                    "tangent_angle" => RhoVariant::TangentAngle,
                    "angular_rate" => RhoVariant::AngularRate,
                    _ => return Err(bad("rho (tangent_angle or angular_rate)")),
                }
            }
            "knn_symmetrize" => cfg.net.knn_symmetrize = parse_bool()?,
            "reset_edge_weights" => cfg.net.reset_edge_weights = parse_bool()?,
            "gamma1" => cfg.loss.gamma1 = parse_f64()?,
            "gamma2" => cfg.loss.gamma2 = parse_f64()?,
            "xi" => cfg.loss.xi = parse_f64()?,
            "alpha" => cfg.loss.alpha = parse_f64()?,
            "beta" => cfg.loss.beta = parse_f64()?,
            "random_forgery_weight" => cfg.loss.random_forgery_weight = parse_f64()?,
            "normalize_loss_terms" => cfg.loss.normalize_terms = parse_bool()?,
            "dtw" => {
                dtw_soft = match value {
                    "hard" => false,
                    "soft" => true,
                    _ => return Err(bad("dtw (hard or soft)")),
                }
            }
            "soft_dtw_gamma" => soft_gamma = parse_f64()?,
            "score_aggregation" => {
                cfg.aggregation = match value {
                    "mean" => Aggregation::Mean,
                    "min" => Aggregation::Min,
                    _ => return Err(bad("score_aggregation (mean or min)")),
                }
            }
            "eer_interpolation" => {
                cfg.interpolation = match value {
                    "midpoint" => EerInterpolation::Midpoint,
                    "linear" => EerInterpolation::Linear,
                    _ => return Err(bad("eer_interpolation (midpoint or linear)")),
                }
            }
            other => {
                return Err(Error::Config(format!("line {lineno}: unknown key `{other}`")))
            }
        }
    }
    cfg.dtw = if dtw_soft {
        DtwMode::Soft { gamma: soft_gamma }
    } else {
        DtwMode::Hard
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    parse(&std::fs::read_to_string(path)?)
}
