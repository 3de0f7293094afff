//! Model and run configuration.
//!
//! The configuration round-trips through a flat `key = value` text file; the
//! key set is fixed and unknown keys are rejected so typos surface early.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Convolutional backbone used to produce feature capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Two 3x3 convolutions (32 then 64 channels) plus a 2x2 max-pool,
    /// yielding 1152 feature capsules.
    Conv2,
    /// 18-layer residual network reduced to 288 feature capsules.
    ResNet18,
}

impl EncoderKind {
    /// Feature-capsule count produced by this backbone.
    pub fn n_feature_caps(self) -> usize {
        match self {
            EncoderKind::Conv2 => 1152,
            EncoderKind::ResNet18 => 288,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv2" => Ok(EncoderKind::Conv2),
            "resnet18" => Ok(EncoderKind::ResNet18),
            other => Err(Error::config(format!(
                "unknown encoder kind '{other}' (expected conv2 or resnet18)"
            ))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Conv2 => write!(f, "conv2"),
            EncoderKind::ResNet18 => write!(f, "resnet18"),
        }
    }
}

/// Which spatial-frequency band of the input the decoder is trained to
/// reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconTargetMode {
    FullSpectrum,
    LowFreq,
    HighFreq,
}

impl ReconTargetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full_spectrum" => Ok(ReconTargetMode::FullSpectrum),
            "low_freq" => Ok(ReconTargetMode::LowFreq),
            "high_freq" => Ok(ReconTargetMode::HighFreq),
            other => Err(Error::config(format!(
                "unknown recon_target_mode '{other}' (expected full_spectrum, low_freq or high_freq)"
            ))),
        }
    }
}

impl fmt::Display for ReconTargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReconTargetMode::FullSpectrum => write!(f, "full_spectrum"),
            ReconTargetMode::LowFreq => write!(f, "low_freq"),
            ReconTargetMode::HighFreq => write!(f, "high_freq"),
        }
    }
}

/// Full model + training + evaluation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    pub n_feature_caps: usize,
    pub feature_dim: usize,
    pub n_object_caps: usize,
    pub object_dim: usize,
    /// Routing iterations inside one global step.
    pub local_routing_iters: usize,
    /// Maximum number of global steps per inference.
    pub max_global_steps: usize,
    /// Stop iterating once softmax entropy of the class scores drops below this.
    pub entropy_threshold: f64,
    /// Reconstruction intensity above which a pixel enters the spatial mask.
    pub mask_threshold: f32,
    pub recon_target_mode: ReconTargetMode,
    /// Ablation: feed the raw input to every global step.
    pub disable_spatial_mask: bool,
    /// Ablation: keep all routing coefficients fixed at 1.
    pub disable_feature_binding: bool,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Per-epoch exponential decay factor for the learning rate.
    pub lr_decay: f64,
    /// Early stopping: epochs without validation improvement before halting.
    pub patience: usize,
    pub validation_fraction: f64,
    /// Weight on the reconstruction MSE term of the training objective.
    pub recon_loss_weight: f64,
    /// Corruption names making up the shape-focused evaluation subset.
    pub shape_subset: Vec<String>,
    /// Number of seeds trained/evaluated when a multi-seed run is requested.
    pub seeds: usize,
    pub data_root: String,
    pub out_dir: String,
}

/// Default shape-focused subset: corruptions that perturb local texture
/// through noise, blur, or occlusion while leaving the global shape intact.
pub const DEFAULT_SHAPE_SUBSET: [&str; 8] = [
    "shot_noise",
    "impulse_noise",
    "glass_blur",
    "motion_blur",
    "fog",
    "spatter",
    "dotted_line",
    "zigzag",
];

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::Conv2,
            n_feature_caps: EncoderKind::Conv2.n_feature_caps(),
            feature_dim: 8,
            n_object_caps: 10,
            object_dim: 16,
            local_routing_iters: 3,
            max_global_steps: 5,
            entropy_threshold: 0.6,
            mask_threshold: 0.1,
            recon_target_mode: ReconTargetMode::FullSpectrum,
            disable_spatial_mask: false,
            disable_feature_binding: false,
            batch_size: 128,
            initial_lr: 0.1,
            lr_decay: 0.96,
            patience: 20,
            validation_fraction: 0.1,
            // 0.0005 per pixel on the summed squared error, expressed against
            // the mean-MSE convention used by `reconstruction_loss`.
            recon_loss_weight: 0.0005 * 784.0,
            shape_subset: DEFAULT_SHAPE_SUBSET.iter().map(|s| s.to_string()).collect(),
            seeds: 1,
            data_root: "data".to_string(),
            out_dir: "runs".to_string(),
        }
    }
}

/// Checks every structural invariant and returns the config unchanged.
pub fn validate_config(config: ModelConfig) -> Result<ModelConfig> {
    if config.max_global_steps < 1 {
        return Err(Error::config("max_global_steps must be \u{2265} 1"));
    }
    if config.local_routing_iters < 1 {
        return Err(Error::config("local_routing_iters must be \u{2265} 1"));
    }
    if !(config.mask_threshold > 0.0 && config.mask_threshold < 1.0) {
        return Err(Error::config(format!(
            "mask_threshold must lie in (0, 1), got {}",
            config.mask_threshold
        )));
    }
    if !(config.entropy_threshold > 0.0) {
        return Err(Error::config(format!(
            "entropy_threshold must be > 0, got {}",
            config.entropy_threshold
        )));
    }
    let expected_caps = config.encoder_kind.n_feature_caps();
    if config.n_feature_caps != expected_caps {
        return Err(Error::config(format!(
            "n_feature_caps {} does not match {} encoder output ({})",
            config.n_feature_caps, config.encoder_kind, expected_caps
        )));
    }
    if config.feature_dim != 8 || config.object_dim != 16 || config.n_object_caps != 10 {
        return Err(Error::config(
            "capsule geometry is fixed at 8-d features and ten 16-d objects",
        ));
    }
    if config.batch_size < 1 {
        return Err(Error::config("batch_size must be \u{2265} 1"));
    }
    if !(config.initial_lr > 0.0) {
        return Err(Error::config("initial_lr must be > 0"));
    }
    if !(config.lr_decay > 0.0 && config.lr_decay <= 1.0) {
        return Err(Error::config("lr_decay must lie in (0, 1]"));
    }
    if !(config.validation_fraction > 0.0 && config.validation_fraction < 1.0) {
        return Err(Error::config("validation_fraction must lie in (0, 1)"));
    }
    if config.recon_loss_weight < 0.0 {
        return Err(Error::config("recon_loss_weight must be \u{2265} 0"));
    }
    if config.seeds < 1 {
        return Err(Error::config("seeds must be \u{2265} 1"));
    }
    {
        let mut seen = BTreeSet::new();
        for name in &config.shape_subset {
            if !seen.insert(name.as_str()) {
                return Err(Error::config(format!(
                    "shape_subset lists '{name}' more than once"
                )));
            }
        }
    }
    Ok(config)
}

impl ModelConfig {
    /// Renders the flat `key = value` form consumed by [`ModelConfig::from_config_str`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("encoder_kind", self.encoder_kind.to_string());
        push("n_feature_caps", self.n_feature_caps.to_string());
        push("local_routing_iters", self.local_routing_iters.to_string());
        push("max_global_steps", self.max_global_steps.to_string());
        push("entropy_threshold", self.entropy_threshold.to_string());
        push("mask_threshold", self.mask_threshold.to_string());
        push("recon_target_mode", self.recon_target_mode.to_string());
        push("disable_spatial_mask", self.disable_spatial_mask.to_string());
        push(
            "disable_feature_binding",
            self.disable_feature_binding.to_string(),
        );
        push("batch_size", self.batch_size.to_string());
        push("initial_lr", self.initial_lr.to_string());
        push("lr_decay", self.lr_decay.to_string());
        push("patience", self.patience.to_string());
        push("recon_loss_weight", self.recon_loss_weight.to_string());
        push("shape_subset", self.shape_subset.join(","));
        push("seeds", self.seeds.to_string());
        push("data_root", self.data_root.clone());
        push("out_dir", self.out_dir.clone());
        s
    }

    /// Parses the flat text form. Keys may appear in any order; omitted keys
    /// keep their defaults; unknown keys are rejected.
    pub fn from_config_str(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        let mut caps_given = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::config(format!("line {}: invalid {what} '{value}'", lineno + 1))
            };
            match key {
                "encoder_kind" => cfg.encoder_kind = EncoderKind::parse(value)?,
                "n_feature_caps" => {
                    cfg.n_feature_caps = value.parse().map_err(|_| bad("n_feature_caps"))?;
                    caps_given = true;
                }
                "local_routing_iters" => {
                    cfg.local_routing_iters =
                        value.parse().map_err(|_| bad("local_routing_iters"))?
                }
                "max_global_steps" => {
                    cfg.max_global_steps = value.parse().map_err(|_| bad("max_global_steps"))?
                }
                "entropy_threshold" => {
                    cfg.entropy_threshold = value.parse().map_err(|_| bad("entropy_threshold"))?
                }
                "mask_threshold" => {
                    cfg.mask_threshold = value.parse().map_err(|_| bad("mask_threshold"))?
                }
                "recon_target_mode" => cfg.recon_target_mode = ReconTargetMode::parse(value)?,
                "disable_spatial_mask" => {
                    cfg.disable_spatial_mask =
                        value.parse().map_err(|_| bad("disable_spatial_mask"))?
                }
                "disable_feature_binding" => {
                    cfg.disable_feature_binding =
                        value.parse().map_err(|_| bad("disable_feature_binding"))?
                }
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "initial_lr" => cfg.initial_lr = value.parse().map_err(|_| bad("initial_lr"))?,
                "lr_decay" => cfg.lr_decay = value.parse().map_err(|_| bad("lr_decay"))?,
                "patience" => cfg.patience = value.parse().map_err(|_| bad("patience"))?,
                "recon_loss_weight" => {
                    cfg.recon_loss_weight = value.parse().map_err(|_| bad("recon_loss_weight"))?
                }
                "shape_subset" => {
                    cfg.shape_subset = value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                }
                "seeds" => cfg.seeds = value.parse().map_err(|_| bad("seeds"))?,
                "data_root" => cfg.data_root = value.to_string(),
                "out_dir" => cfg.out_dir = value.to_string(),
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown config key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if !caps_given {
            cfg.n_feature_caps = cfg.encoder_kind.n_feature_caps();
        }
        validate_config(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ModelConfig> {
        let text = std::fs::read_to_string(path)?;
        ModelConfig::from_config_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }

    /// Stable short hash identifying this configuration in reports.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// `data_root`, unless the `RECON_ATTN_DATA` environment variable is set.
    pub fn effective_data_root(&self) -> String {
        std::env::var("RECON_ATTN_DATA").unwrap_or_else(|_| self.data_root.clone())
    }
}
