//! Training configuration.
//!
//! Every hyperparameter lives in [`TrainConfig`], grouped into sections whose
//! fields are addressed as `section.field` in config files and CLI overrides.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::StrongOp;
use crate::error::{validation, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub mae: MaeConfig,
    pub ssl: SslConfig,
    pub optim: OptimConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    /// Hidden width of the MLP as a multiple of the token width.
    pub mlp_ratio: usize,
    /// Dropout on residual branches in train mode.
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    /// When false the model has no decoder and trains the pseudo-label
    /// objective alone.
    pub enabled: bool,
    pub mask_ratio: f64,
    pub norm_pix_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Confidence threshold; a pseudo label is kept only when `max p > tau`.
    pub tau: f64,
    pub lambda_u: f64,
    pub mu_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupObjective {
    /// `L_s + mu * L_mae` during warmup.
    SupervisedMae,
    /// `L_s` only during warmup.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub warmup_epochs: u64,
    /// Total epochs including warmup.
    pub total_epochs: u64,
    pub labeled_per_batch: usize,
    pub unlabeled_ratio: usize,
    pub warmup_objective: WarmupObjective,
    /// Caps the number of steps per epoch; `0` means one full pass over the
    /// unlabeled partition.
    pub steps_per_epoch: usize,
    pub eval_every_epochs: u64,
    pub checkpoint_every_epochs: u64,
    pub eval_batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    /// `<path>/train/<class>/*.png` and `<path>/val/<class>/*.png`.
    ImageFolder,
    /// CIFAR-10 binary batches under `<path>`.
    CifarBinary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: String,
    /// Split manifest to load; empty derives the split from `seed`.
    pub split_path: String,
    pub labeled_fraction: f64,
    pub synthetic_train_size: usize,
    pub synthetic_val_size: usize,
    pub synthetic_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub strong_ops: Vec<StrongOp>,
    pub strong_num_ops: usize,
    pub strong_magnitude_max: f64,
    pub erase_prob: f64,
    pub erase_scale_min: f64,
    pub erase_scale_max: f64,
    pub erase_ratio_min: f64,
    pub erase_ratio_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            image_size: 32,
            patch_size: 4,
            channels: 3,
            encoder_depth: 4,
            encoder_width: 64,
            encoder_heads: 4,
            decoder_depth: 2,
            decoder_width: 64,
            decoder_heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
        }
    }
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mask_ratio: 0.75,
            norm_pix_target: false,
        }
    }
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            lambda_u: 10.0,
            mu_mae: 5.0,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_final: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 0.0,
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 2,
            total_epochs: 12,
            labeled_per_batch: 8,
            unlabeled_ratio: 7,
            warmup_objective: WarmupObjective::SupervisedMae,
            steps_per_epoch: 0,
            eval_every_epochs: 1,
            checkpoint_every_epochs: 1,
            eval_batch_size: 256,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: String::new(),
            split_path: String::new(),
            labeled_fraction: 0.1,
            synthetic_train_size: 4000,
            synthetic_val_size: 1000,
            synthetic_noise: 0.05,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_scale_min: 0.6,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            strong_ops: StrongOp::ALL.to_vec(),
            strong_num_ops: 2,
            strong_magnitude_max: 1.0,
            erase_prob: 1.0,
            erase_scale_min: 0.02,
            erase_scale_max: 0.25,
            erase_ratio_min: 0.3,
            erase_ratio_max: 3.3,
        }
    }
}

impl TrainConfig {
    /// Default desk-scale preset: 32x32 images, width 64, depth 4.
    pub fn desk() -> Self {
        Self::default()
    }

    /// ViT-Small geometry with the full-scale schedule (100 warmup epochs
    /// followed by 600 semi-supervised epochs) and an MAE-default decoder.
    pub fn vit_small() -> Self {
        let mut cfg = Self {
            model: ModelConfig {
                num_classes: 1000,
                image_size: 224,
                patch_size: 16,
                channels: 3,
                encoder_depth: 12,
                encoder_width: 384,
                encoder_heads: 6,
                decoder_depth: 8,
                decoder_width: 512,
                decoder_heads: 16,
                mlp_ratio: 4,
                dropout: 0.0,
            },
            ..Self::default()
        };
        cfg.trainer.warmup_epochs = 100;
        cfg.trainer.total_epochs = 700;
        cfg.trainer.labeled_per_batch = 64;
        cfg.data.source = DataSource::ImageFolder;
        cfg
    }

    pub fn num_patches(&self) -> usize {
        let g = self.model.image_size / self.model.patch_size;
        g * g
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.trainer.labeled_per_batch * self.trainer.unlabeled_ratio
    }

    /// Checks every documented constraint and names the first one violated.
    pub fn validate(&self) -> Result<()> {
        // Keeps the seed representable as a signed 64-bit config integer.
        if self.seed > i64::MAX as u64 {
            return Err(validation(format!("seed must be at most {}", i64::MAX)));
        }
        let m = &self.model;
        positive("model.num_classes", m.num_classes)?;
        positive("model.image_size", m.image_size)?;
        positive("model.patch_size", m.patch_size)?;
        positive("model.channels", m.channels)?;
        positive("model.encoder_width", m.encoder_width)?;
        positive("model.encoder_heads", m.encoder_heads)?;
        positive("model.decoder_width", m.decoder_width)?;
        positive("model.decoder_heads", m.decoder_heads)?;
        positive("model.mlp_ratio", m.mlp_ratio)?;
        if !m.image_size.is_multiple_of(m.patch_size) {
            return Err(validation(format!(
                "model.image_size ({}) must be divisible by model.patch_size ({})",
                m.image_size, m.patch_size
            )));
        }
        if !m.encoder_width.is_multiple_of(m.encoder_heads) {
            return Err(validation(format!(
                "model.encoder_width ({}) must be divisible by model.encoder_heads ({})",
                m.encoder_width, m.encoder_heads
            )));
        }
        if !m.decoder_width.is_multiple_of(m.decoder_heads) {
            return Err(validation(format!(
                "model.decoder_width ({}) must be divisible by model.decoder_heads ({})",
                m.decoder_width, m.decoder_heads
            )));
        }
        // 2-D sine-cosine tables split the width into four equal bands.
        for (key, w) in [
            ("model.encoder_width", m.encoder_width),
            ("model.decoder_width", m.decoder_width),
        ] {
            if w % 4 != 0 {
                return Err(validation(format!("{key} ({w}) must be divisible by 4")));
            }
        }
        unit_interval("model.dropout", m.dropout, false)?;

        let mask = &self.mae;
        if !(0.0..1.0).contains(&mask.mask_ratio) {
            return Err(validation(format!(
                "mae.mask_ratio ({}) must lie in [0, 1)",
                mask.mask_ratio
            )));
        }

        let s = &self.ssl;
        if !(s.tau > 0.0 && s.tau <= 1.0) {
            return Err(validation(format!(
                "ssl.tau ({}) must lie in (0, 1]",
                s.tau
            )));
        }
        nonnegative("ssl.lambda_u", s.lambda_u)?;
        nonnegative("ssl.mu_mae", s.mu_mae)?;

        let o = &self.optim;
        if !(o.lr_init > 0.0 && o.lr_init.is_finite()) {
            return Err(validation(format!(
                "optim.lr_init ({}) must be positive",
                o.lr_init
            )));
        }
        if !(o.lr_final > 0.0 && o.lr_final.is_finite()) {
            return Err(validation(format!(
                "optim.lr_final ({}) must be positive",
                o.lr_final
            )));
        }
        if o.lr_final > o.lr_init {
            return Err(validation(format!(
                "optim.lr_final ({}) must not exceed optim.lr_init ({})",
                o.lr_final, o.lr_init
            )));
        }
        unit_interval("optim.beta1", o.beta1, false)?;
        unit_interval("optim.beta2", o.beta2, false)?;
        if o.eps.is_nan() || o.eps <= 0.0 {
            return Err(validation("optim.eps must be positive"));
        }
        nonnegative("optim.weight_decay", o.weight_decay)?;
        nonnegative("optim.grad_clip", o.grad_clip)?;

        let t = &self.trainer;
        if t.total_epochs == 0 {
            return Err(validation("trainer.total_epochs must be positive"));
        }
        if t.warmup_epochs >= t.total_epochs {
            return Err(validation(format!(
                "trainer.warmup_epochs ({}) must be less than trainer.total_epochs ({})",
                t.warmup_epochs, t.total_epochs
            )));
        }
        positive("trainer.labeled_per_batch", t.labeled_per_batch)?;
        positive("trainer.unlabeled_ratio", t.unlabeled_ratio)?;
        positive("trainer.eval_batch_size", t.eval_batch_size)?;

        let d = &self.data;
        if !(d.labeled_fraction > 0.0 && d.labeled_fraction < 1.0) {
            return Err(validation(format!(
                "data.labeled_fraction ({}) must lie in (0, 1)",
                d.labeled_fraction
            )));
        }
        nonnegative("data.synthetic_noise", d.synthetic_noise)?;

        let a = &self.augment;
        unit_interval("augment.flip_prob", a.flip_prob, true)?;
        ordered_range("augment.crop_scale", a.crop_scale_min, a.crop_scale_max)?;
        if a.crop_scale_min <= 0.0 || a.crop_scale_max > 1.0 {
            return Err(validation("augment.crop_scale_* must lie in (0, 1]"));
        }
        ordered_range("augment.crop_ratio", a.crop_ratio_min, a.crop_ratio_max)?;
        if a.crop_ratio_min <= 0.0 {
            return Err(validation("augment.crop_ratio_min must be positive"));
        }
        if a.strong_num_ops > 0 && a.strong_ops.is_empty() {
            return Err(validation(
                "augment.strong_ops must not be empty when augment.strong_num_ops > 0",
            ));
        }
        unit_interval("augment.strong_magnitude_max", a.strong_magnitude_max, true)?;
        unit_interval("augment.erase_prob", a.erase_prob, true)?;
        ordered_range("augment.erase_scale", a.erase_scale_min, a.erase_scale_max)?;
        if a.erase_scale_min <= 0.0 || a.erase_scale_max > 1.0 {
            return Err(validation("augment.erase_scale_* must lie in (0, 1]"));
        }
        ordered_range("augment.erase_ratio", a.erase_ratio_min, a.erase_ratio_max)?;
        if a.erase_ratio_min <= 0.0 {
            return Err(validation("augment.erase_ratio_min must be positive"));
        }
        Ok(())
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(validation(format!("{key} must be a positive integer")));
    }
    Ok(())
}

fn nonnegative(key: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(validation(format!(
            "{key} ({v}) must be a finite nonnegative number"
        )));
    }
    Ok(())
}

fn unit_interval(key: &str, v: f64, closed: bool) -> Result<()> {
    let ok = if closed {
        (0.0..=1.0).contains(&v)
    } else {
        (0.0..1.0).contains(&v)
    };
    if !ok {
        let right = if closed { "]" } else { ")" };
        return Err(validation(format!("{key} ({v}) must lie in [0, 1{right}")));
    }
    Ok(())
}

fn ordered_range(key: &str, lo: f64, hi: f64) -> Result<()> {
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(validation(format!(
            "{key}_min ({lo}) must not exceed {key}_max ({hi})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn defaults_are_valid() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.ssl.tau, 0.95);
        assert_eq!(cfg.mae.mask_ratio, 0.75);
        assert_eq!(cfg.ssl.lambda_u, 10.0);
        assert_eq!(cfg.ssl.mu_mae, 5.0);
        assert_eq!(cfg.unlabeled_per_batch(), 56);
        TrainConfig::vit_small().validate().unwrap();
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.model.image_size = 30;
        cfg.model.patch_size = 4;
        match cfg.validate() {
            Err(Error::Validation { constraint }) => {
                assert!(constraint.contains("model.image_size"), "{constraint}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule_and_width_constraints() {
        let mut cfg = TrainConfig::default();
        cfg.optim.lr_final = 1e-2;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.trainer.warmup_epochs = cfg.trainer.total_epochs;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.model.encoder_heads = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.ssl.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.ssl.tau = 1.0;
        cfg.validate().unwrap();

        let mut cfg = TrainConfig::default();
        cfg.mae.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
    }
}
