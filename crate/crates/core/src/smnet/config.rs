//! Architecture hyper-parameters and the ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder depth is fixed: four stride-2 stages take the working
/// resolution down to 1/16 of the output size, which is why output sizes
/// must be divisible by 16.
pub const ENCODER_DEPTH: usize = 4;

/// Everything that determines the network topology and its initial
/// weights. Two models built from equal configs are bitwise identical.
///
/// The four switches select the ablation rows: all off is the plain
/// residual encoder-decoder, `use_skip` adds the U-shaped skip
/// connections, `use_attention` the channel/spatial attention pair, and
/// `use_perceptual` / `use_geometric` the two auxiliary losses with
/// their extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_bottleneck_blocks")]
    pub bottleneck_blocks: usize,
    #[serde(default = "default_spatial_kernel")]
    pub spatial_kernel: usize,
    #[serde(default = "default_channel_reduction")]
    pub channel_reduction: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f32,
    #[serde(default = "default_true")]
    pub use_skip: bool,
    #[serde(default = "default_true")]
    pub use_attention: bool,
    #[serde(default = "default_true")]
    pub use_perceptual: bool,
    #[serde(default = "default_true")]
    pub use_geometric: bool,
    /// Which of the four up-sampling stages receives the geometric map.
    #[serde(default = "default_geometric_stage")]
    pub geometric_stage: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_base_channels() -> usize {
    16
}
fn default_bottleneck_blocks() -> usize {
    6
}
fn default_spatial_kernel() -> usize {
    7
}
fn default_channel_reduction() -> usize {
    4
}
fn default_leaky_slope() -> f32 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_geometric_stage() -> usize {
    3
}
fn default_scale() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            base_channels: default_base_channels(),
            bottleneck_blocks: default_bottleneck_blocks(),
            spatial_kernel: default_spatial_kernel(),
            channel_reduction: default_channel_reduction(),
            leaky_slope: default_leaky_slope(),
            use_skip: true,
            use_attention: true,
            use_perceptual: true,
            use_geometric: true,
            geometric_stage: default_geometric_stage(),
            scale: default_scale(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if self.bottleneck_blocks < 1 {
            return Err(Error::Config("bottleneck_blocks must be at least 1".into()));
        }
        if !matches!(self.scale, 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "scale must be 2, 4 or 8, got {}",
                self.scale
            )));
        }
        if self.channel_reduction == 0 {
            return Err(Error::Config("channel_reduction must be positive".into()));
        }
        if self.geometric_stage < 1 || self.geometric_stage > ENCODER_DEPTH {
            return Err(Error::Config(format!(
                "geometric_stage must lie in 1..={ENCODER_DEPTH}, got {}",
                self.geometric_stage
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Channel width after encoder stage `i` (0 is the stem output).
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setup() {
        let c = ModelConfig::default();
        assert_eq!(c.base_channels, 16);
        assert_eq!(c.bottleneck_blocks, 6);
        assert_eq!(c.spatial_kernel, 7);
        assert_eq!(c.channel_reduction, 4);
        assert_eq!(c.leaky_slope, 0.01);
        assert!(c.use_skip && c.use_attention && c.use_perceptual && c.use_geometric);
        assert_eq!(c.geometric_stage, 3);
        assert_eq!(c.scale, 2);
        c.validate().unwrap();
        assert_eq!(c.width(0), 16);
        assert_eq!(c.width(4), 256);
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let base = ModelConfig::default();
        let cases: Vec<Box<dyn Fn(&mut ModelConfig)>> = vec![
            Box::new(|c| c.base_channels = 3),
            Box::new(|c| c.bottleneck_blocks = 0),
            Box::new(|c| c.scale = 3),
            Box::new(|c| c.scale = 16),
            Box::new(|c| c.channel_reduction = 0),
            Box::new(|c| c.geometric_stage = 0),
            Box::new(|c| c.geometric_stage = 5),
            Box::new(|c| c.leaky_slope = -0.1),
            Box::new(|c| c.leaky_slope = 1.0),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut c = base.clone();
            mutate(&mut c);
            assert!(c.validate().is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"scale": 4, "seed": 7}"#).unwrap();
        assert_eq!(c.scale, 4);
        assert_eq!(c.seed, 7);
        assert_eq!(c.base_channels, 16);
        assert!(c.use_attention);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"scales": 4}"#).is_err());
        let round: ModelConfig =
            serde_json::from_str(&serde_json::to_string(&ModelConfig::default()).unwrap()).unwrap();
        assert_eq!(round, ModelConfig::default());
    }
}
