use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization used after the convolutions of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    Instance,
    Adaptive,
}

/// Architecture of the self-guided generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shuffle levels above the full-resolution base.
    pub levels: usize,
    pub base_channels: usize,
    /// Level `l >= 1` has `round(base_channels * 2^l * level_channel_factor)` channels.
    pub level_channel_factor: f64,
    /// Residual blocks per level, index 0 being full resolution.
    pub blocks_per_level: Vec<usize>,
    pub use_global_features: bool,
    /// Hidden width of the global gate is `channels / gate_reduction`.
    pub gate_reduction: usize,
    pub norm_mode: NormMode,
    pub task_count: usize,
    pub latent_w_dim: usize,
    pub mapping_depth: usize,
    pub global_residual: bool,
    /// Start the output convolution at zero so the untrained model is the identity.
    pub zero_output_init: bool,
    pub slope: f64,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_channels: 40,
            level_channel_factor: 0.5,
            blocks_per_level: vec![3, 1, 1],
            use_global_features: true,
            gate_reduction: 1,
            norm_mode: NormMode::Instance,
            task_count: 1,
            latent_w_dim: 128,
            mapping_depth: 3,
            global_residual: true,
            zero_output_init: true,
            slope: crate::layers::DEFAULT_SLOPE,
            eps: crate::layers::DEFAULT_EPS,
        }
    }
}

impl ModelConfig {
    /// Full GSGN.
    pub fn gsgn() -> Self {
        Self::default()
    }

    pub fn gsgn_without_in() -> Self {
        Self { norm_mode: NormMode::None, ..Self::default() }
    }

    pub fn gsgn_without_global_and_in() -> Self {
        Self { norm_mode: NormMode::None, use_global_features: false, ..Self::default() }
    }

    /// Two-level plain self-guided network with wider upper levels.
    pub fn sgn2() -> Self {
        Self {
            base_channels: 20,
            level_channel_factor: 2.0,
            use_global_features: false,
            norm_mode: NormMode::None,
            ..Self::default()
        }
    }

    /// Task-adaptive GSGN conditioned on `task_count` styles.
    pub fn mt_gsgn(task_count: usize) -> Self {
        Self { norm_mode: NormMode::Adaptive, task_count, ..Self::default() }
    }

    /// Small GSGN for 64x64 experiments on a single core.
    pub fn desk() -> Self {
        Self {
            base_channels: 12,
            blocks_per_level: vec![1, 1, 1],
            latent_w_dim: 32,
            ..Self::default()
        }
    }

    pub fn desk_multitask(task_count: usize) -> Self {
        Self { norm_mode: NormMode::Adaptive, task_count, ..Self::desk() }
    }

    /// Channel width of level `l`.
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            (self.base_channels as f64 * 2f64.powi(level as i32) * self.level_channel_factor).round()
                as usize
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels).map(|l| self.width(l)).collect()
    }

    /// Inputs must have sides divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn gate_hidden(&self) -> usize {
        (self.width(self.levels) / self.gate_reduction).max(1)
    }

    pub fn is_adaptive(&self) -> bool {
        self.norm_mode == NormMode::Adaptive
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.levels > 6 {
            return bad(format!("{} levels is more than supported (6)", self.levels));
        }
        if self.base_channels == 0 || !(self.level_channel_factor > 0.0) {
            return bad("channel widths must be positive".into());
        }
        for l in 1..=self.levels {
            let w = self.width(l);
            if w == 0 || w % 4 != 0 {
                return bad(format!("level {l} width {w} must be a positive multiple of 4"));
            }
        }
        if self.blocks_per_level.len() != self.levels + 1 {
            return bad(format!(
                "blocks_per_level needs {} entries, got {}",
                self.levels + 1,
                self.blocks_per_level.len()
            ));
        }
        if self.gate_reduction == 0 {
            return bad("gate_reduction must be positive".into());
        }
        if self.is_adaptive() {
            if self.task_count == 0 {
                return bad("adaptive normalization needs task_count >= 1".into());
            }
            if self.latent_w_dim == 0 || self.mapping_depth == 0 {
                return bad("mapping network needs positive width and depth".into());
            }
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad(format!("slope {} outside (0, 1)", self.slope));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        Ok(())
    }
}

/// Convolutional trunk shared by the critic and the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub max_channels: usize,
    pub slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { base_channels: 32, stages: 4, max_channels: 256, slope: crate::layers::DEFAULT_SLOPE }
    }
}

impl CriticConfig {
    pub fn desk() -> Self {
        Self { base_channels: 8, max_channels: 64, ..Self::default() }
    }

    pub fn width(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 6 {
            return Err(Error::Config(format!("critic stages {} outside 1..=6", self.stages)));
        }
        if self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::Config("critic widths must be positive".into()));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("slope {} outside (0, 1)", self.slope)));
        }
        Ok(())
    }
}
