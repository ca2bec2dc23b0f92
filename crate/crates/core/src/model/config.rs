use serde::{Deserialize, Serialize};

use crate::error::{Result, SspError};
use crate::prompt::{grid_side, Strategy};

/// Shapes, prompt dimensions and module switches of the video classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip (T).
    pub frames: usize,
    /// Channels per frame (C).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Token width (d).
    pub d_model: usize,
    /// States per scanned channel (D).
    pub d_state: usize,
    /// Scanned branch width as a multiple of `d_model`.
    pub expand: usize,
    /// Mamba layers (L).
    pub layers: usize,
    /// IFG bottleneck width (d^s).
    pub d_spatial: usize,
    /// IFS bottleneck width (d^t).
    pub d_temporal: usize,
    /// Boundaries, after layers `1..=n_ifs`, that regenerate inter-frame prompts.
    pub n_ifs: usize,
    pub strategy: Strategy,
    pub n_classes: usize,
    pub use_ifg: bool,
    pub use_ifs: bool,
    pub use_entropy_gate: bool,
    pub use_variance_gate: bool,
    /// Initial value of every IFS scale β.
    pub beta_init: f64,
    /// Half-width of the uniform init of the variance up-projection.
    pub variance_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            channels: 1,
            height: 16,
            width: 16,
            patch_h: 4,
            patch_w: 4,
            d_model: 32,
            d_state: 8,
            expand: 2,
            layers: 4,
            d_spatial: 16,
            d_temporal: 8,
            n_ifs: 3,
            strategy: Strategy::LastForward,
            n_classes: 6,
            use_ifg: true,
            use_ifs: true,
            use_entropy_gate: true,
            use_variance_gate: true,
            beta_init: 1.0,
            variance_init: 0.1,
        }
    }
}

impl ModelConfig {
    /// Patches per frame (N).
    pub fn patches(&self) -> usize {
        (self.height / self.patch_h) * (self.width / self.patch_w)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }

    pub fn d_inner(&self) -> usize {
        self.d_model * self.expand
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("layers", self.layers),
            ("d_spatial", self.d_spatial),
            ("d_temporal", self.d_temporal),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SspError::config(format!("{name} must be positive")));
        }
        if self.height % self.patch_h != 0 || self.width % self.patch_w != 0 {
            return Err(SspError::config(format!(
                "frame {}×{} is not divisible into {}×{} patches",
                self.height, self.width, self.patch_h, self.patch_w
            )));
        }
        grid_side(self.patches())?;
        if self.d_spatial >= self.d_model || self.d_temporal >= self.d_model {
            return Err(SspError::config(format!(
                "prompt widths d_spatial={} and d_temporal={} must be below d_model={}",
                self.d_spatial, self.d_temporal, self.d_model
            )));
        }
        if self.n_ifs == 0 || self.n_ifs >= self.layers {
            return Err(SspError::config(format!(
                "n_ifs={} must lie in 1..={} for {} layers",
                self.n_ifs,
                self.layers - 1,
                self.layers
            )));
        }
        if !self.beta_init.is_finite() || !(self.variance_init >= 0.0) {
            return Err(SspError::config(
                "beta_init and variance_init must be finite, variance_init ≥ 0",
            ));
        }
        Ok(())
    }

    /// Whether the IFG module contributes anything to the forward pass.
    pub fn ifg_in_use(&self) -> bool {
        self.use_ifg || (self.use_ifs && (self.use_entropy_gate || self.use_variance_gate))
    }

    /// Sequence length after all insertions.
    pub fn final_len(&self) -> usize {
        1 + self.frames * (self.patches() + usize::from(self.use_ifs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.patches(), 16);
        assert_eq!(c.final_len(), 1 + 8 * 17);
    }

    #[test]
    fn patch_counts() {
        let c = ModelConfig {
            patch_h: 8,
            patch_w: 8,
            ..ModelConfig::default()
        };
        assert_eq!(c.patches(), 4);
    }

    #[test]
    fn invalid_shapes_are_config_errors() {
        let bad = [
            ModelConfig {
                patch_h: 5,
                ..ModelConfig::default()
            },
            ModelConfig {
                patch_h: 8,
                patch_w: 4,
                ..ModelConfig::default()
            },
            ModelConfig {
                n_ifs: 4,
                ..ModelConfig::default()
            },
            ModelConfig {
                d_spatial: 32,
                ..ModelConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(SspError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"n_clases": 6}"#).unwrap_err();
        assert!(err.to_string().contains("n_clases"));
        let c: ModelConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ModelConfig::default());
    }
}
