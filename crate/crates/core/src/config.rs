//! The full hyperparameter record and its validation.
//!
//! One flat [`SpotConfig`] drives data sampling, the model, supervision,
//! post-processing, evaluation and the training loop. It loads from a TOML
//! file where every field is optional (missing fields take the defaults
//! below), and the CLI exposes an override flag per field under the same
//! name.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which per-frame classification loss to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Focal loss with `focal_alpha` / `focal_gamma`.
    Focal,
    /// Cross-entropy with the touch-class term scaled by `ce_weight`.
    WeightedCe,
}

/// Every knob in one record. Defaults are the full-scale settings; call
/// [`SpotConfig::desk`] for the small preset used by tests and CPU runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotConfig {
    /// Clip length L in frames.
    pub clip_length: usize,
    /// Displacement window w: frames within w of an event get positive
    /// classification and displacement supervision.
    pub displacement_window: usize,
    /// Sigma of the Gaussian soft classification label.
    pub soft_label_sigma: f64,
    /// Train with hard window labels instead of Gaussian soft labels
    /// (ablation switch).
    pub hard_labels: bool,
    pub loss_kind: LossKind,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub ce_weight: f64,
    /// Grasp loss weight.
    pub lambda_g: f64,
    /// Hand box enlargement factor before cropping.
    pub patch_scale: f64,
    /// Side of the square hand patch fed to the hand encoder.
    pub patch_size: usize,
    /// Channel count C of backbone feature maps.
    pub feature_dim: usize,
    /// Frame tolerances evaluated by AP.
    pub tolerances: Vec<usize>,
    /// Sigma of the Gaussian attenuation in temporal offset refinement.
    pub tor_sigma: f64,
    /// Full width of the suppression window for NMS / soft-NMS.
    pub nms_window: usize,
    /// Sigma of the soft-NMS confidence decay.
    pub snms_sigma: f64,
    /// Detections below this confidence are dropped.
    pub confidence_floor: f64,
    /// Fraction of sampled clips forced to contain at least one event.
    pub event_bias: f64,
    /// Output channels of each stride-2 backbone block; the last entry must
    /// equal `feature_dim`. Spatial downscale is `2^len`.
    pub backbone_channels: Vec<usize>,
    /// Attention heads in the hand-context cross-attention block.
    pub attn_heads: usize,
    /// Hidden expansion factor of the block's feed-forward layer.
    pub ffn_expansion: usize,
    /// Number of stride-2 scales in the temporal encoder-decoder.
    pub temporal_scales: usize,
    pub batch_size: usize,
    pub clips_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of training videos held out for checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SpotConfig {
    fn default() -> Self {
        Self {
            clip_length: 40,
            displacement_window: 4,
            soft_label_sigma: 2.0,
            hard_labels: false,
            loss_kind: LossKind::Focal,
            focal_alpha: 0.9,
            focal_gamma: 2.0,
            ce_weight: 5.0,
            lambda_g: 0.2,
            patch_scale: 1.2,
            patch_size: 224,
            feature_dim: 768,
            tolerances: vec![0, 1, 2],
            tor_sigma: 4.0,
            nms_window: 9,
            snms_sigma: 1.0,
            confidence_floor: 0.01,
            event_bias: 0.75,
            backbone_channels: vec![96, 192, 384, 768],
            attn_heads: 4,
            ffn_expansion: 2,
            temporal_scales: 2,
            batch_size: 6,
            clips_per_epoch: 5000,
            epochs: 50,
            learning_rate: 4e-4,
            warmup_epochs: 3,
            weight_decay: 0.01,
            grad_clip: 5.0,
            val_fraction: 0.1,
            seed: 17,
        }
    }
}

impl SpotConfig {
    /// Small preset that trains in minutes on one CPU core: 32x32 frames,
    /// L=16, a three-block backbone at C=64.
    pub fn desk() -> Self {
        Self {
            clip_length: 16,
            displacement_window: 2,
            soft_label_sigma: 1.0,
            patch_size: 32,
            feature_dim: 64,
            tor_sigma: 2.0,
            nms_window: 5,
            backbone_channels: vec![16, 32, 64],
            batch_size: 8,
            clips_per_epoch: 200,
            epochs: 10,
            learning_rate: 2e-3,
            warmup_epochs: 1,
            ..Self::default()
        }
    }

    /// Derived sigma default `w/2`, floored at 0.5 as in [`Default`]; used
    /// when a caller changes `displacement_window` and wants the matching
    /// label width.
    pub fn sigma_for_window(w: usize) -> f64 {
        (w as f64 / 2.0).max(0.5)
    }

    /// Spatial downscale factor of the backbone.
    pub fn downscale(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    /// Every invariant violation in the record; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.clip_length < 2 * self.displacement_window + 1 {
            v.push("L must be ≥ 2w+1".to_string());
        }
        if self.soft_label_sigma <= 0.0 {
            v.push("soft_label_sigma must be > 0".to_string());
        }
        if self.tor_sigma <= 0.0 {
            v.push("tor_sigma must be > 0".to_string());
        }
        if self.snms_sigma <= 0.0 {
            v.push("snms_sigma must be > 0".to_string());
        }
        if self.loss_kind == LossKind::Focal && !(0.0..=1.0).contains(&self.focal_alpha) {
            v.push("focal_alpha must lie in [0, 1]".to_string());
        }
        if self.focal_gamma < 0.0 {
            v.push("focal_gamma must be ≥ 0".to_string());
        }
        if self.ce_weight <= 0.0 {
            v.push("ce_weight must be > 0".to_string());
        }
        if self.patch_scale < 1.0 {
            v.push("patch_scale must be ≥ 1".to_string());
        }
        if self.patch_size == 0 {
            v.push("patch_size must be positive".to_string());
        }
        if self.tolerances.is_empty() {
            v.push("tolerances must be non-empty".to_string());
        }
        if self.nms_window == 0 {
            v.push("nms_window must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            v.push("confidence_floor must lie in [0, 1)".to_string());
        }
        if !(0.0..=1.0).contains(&self.event_bias) {
            v.push("event_bias must lie in [0, 1]".to_string());
        }
        if self.backbone_channels.is_empty() {
            v.push("backbone_channels must be non-empty".to_string());
        } else {
            if *self.backbone_channels.last().unwrap() != self.feature_dim {
                v.push("last backbone_channels entry must equal feature_dim".to_string());
            }
            if self.patch_size < self.downscale() {
                v.push("patch_size must be ≥ the backbone downscale".to_string());
            }
        }
        if self.feature_dim == 0 || self.feature_dim % 4 != 0 {
            v.push("feature_dim must be a positive multiple of 4".to_string());
        }
        if self.attn_heads == 0 || self.feature_dim % self.attn_heads.max(1) != 0 {
            v.push("attn_heads must divide feature_dim".to_string());
        }
        if self.ffn_expansion == 0 {
            v.push("ffn_expansion must be positive".to_string());
        }
        if self.clip_length < (1 << self.temporal_scales) {
            v.push("L must be ≥ 2^temporal_scales".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if self.clips_per_epoch == 0 {
            v.push("clips_per_epoch must be positive".to_string());
        }
        if self.epochs == 0 {
            v.push("epochs must be positive".to_string());
        }
        if self.learning_rate <= 0.0 {
            v.push("learning_rate must be > 0".to_string());
        }
        if self.grad_clip < 0.0 {
            v.push("grad_clip must be >= 0".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            v.push("val_fraction must lie in [0, 1)".to_string());
        }
        v
    }

    /// Validate and wrap violations into an error.
    pub fn validated(self) -> Result<Self, ConfigError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(violations.join("; ")))
        }
    }

    /// Load from a TOML file; absent keys take defaults. Does not validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert_eq!(SpotConfig::default().validate(), Vec::<String>::new());
        assert_eq!(SpotConfig::desk().validate(), Vec::<String>::new());
    }

    #[test]
    fn short_clip_violates_window_bound() {
        let cfg = SpotConfig { clip_length: 5, displacement_window: 4, ..SpotConfig::desk() };
        let v = cfg.validate();
        assert!(v.contains(&"L must be ≥ 2w+1".to_string()), "{v:?}");
    }

    #[test]
    fn zero_sigma_is_reported() {
        let cfg = SpotConfig { soft_label_sigma: 0.0, ..SpotConfig::desk() };
        let v = cfg.validate();
        assert!(v.contains(&"soft_label_sigma must be > 0".to_string()), "{v:?}");
    }

    #[test]
    fn toml_round_trip_and_partial_load() {
        let dir = std::env::temp_dir().join("touchspot-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.toml");
        let cfg = SpotConfig::desk();
        cfg.save(&path).unwrap();
        assert_eq!(SpotConfig::load(&path).unwrap(), cfg);

        let partial = dir.join("partial.toml");
        std::fs::write(&partial, "clip_length = 24\nloss_kind = \"weighted_ce\"\n").unwrap();
        let loaded = SpotConfig::load(&partial).unwrap();
        assert_eq!(loaded.clip_length, 24);
        assert_eq!(loaded.loss_kind, LossKind::WeightedCe);
        assert_eq!(loaded.displacement_window, SpotConfig::default().displacement_window);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = std::env::temp_dir().join("touchspot-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(&path, "clip_lenght = 24\n").unwrap();
        assert!(SpotConfig::load(&path).is_err());
    }

    #[test]
    fn sigma_default_tracks_window() {
        assert_eq!(SpotConfig::sigma_for_window(4), 2.0);
        assert_eq!(SpotConfig::sigma_for_window(0), 0.5);
    }
}
