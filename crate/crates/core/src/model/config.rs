use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and adapter hyperparameters of the dual-scale student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Fine patch size (local-window branch).
    pub patch_small: usize,
    /// Coarse patch size (global branch).
    pub patch_large: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the square attention window on the fine token grid.
    pub window: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// Also adapt the classifier weight with a low-rank pair.
    pub head_adapter: bool,
    pub num_classes: usize,
    /// Standard deviation of the positional/class/distillation token init.
    pub token_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            patch_small: 16,
            patch_large: 32,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            window: 7,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_dropout: 0.2,
            head_adapter: false,
            num_classes: 7,
            token_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// 32×32 configuration that trains in seconds on one core.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_small: 4,
            patch_large: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            window: 4,
            token_init_std: 1.0,
            head_adapter: true,
            ..Self::default()
        }
    }

    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_small: 8,
            patch_large: 16,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            window: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn grid_small(&self) -> usize {
        self.image_size / self.patch_small
    }

    pub fn grid_large(&self) -> usize {
        self.image_size / self.patch_large
    }

    pub fn tokens_small(&self) -> usize {
        self.grid_small() * self.grid_small()
    }

    pub fn tokens_large(&self) -> usize {
        self.grid_large() * self.grid_large()
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.image_size == 0 || self.in_channels == 0 {
            return bad("image_size", "image size and channels must be positive".into());
        }
        for (field, p) in [("patch_small", self.patch_small), ("patch_large", self.patch_large)] {
            if p == 0 || self.image_size % p != 0 {
                return bad(
                    field,
                    format!("image size {} is not divisible by patch size {p}", self.image_size),
                );
            }
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(
                "heads",
                format!("embed_dim {} must be divisible by heads {}", self.embed_dim, self.heads),
            );
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        let g = self.grid_small();
        if self.window == 0 || g % self.window != 0 {
            return bad(
                "window",
                format!("window {} does not divide the {g}×{g} fine token grid", self.window),
            );
        }
        if self.lora_rank == 0 || self.lora_rank > self.head_dim() {
            return bad(
                "lora_rank",
                format!("rank {} must lie in 1..={} (head dim)", self.lora_rank, self.head_dim()),
            );
        }
        if !(self.lora_alpha > 0.0) {
            return bad("lora_alpha", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad("lora_dropout", "must lie in [0, 1)".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes", "need at least two classes".into());
        }
        if !(self.token_init_std >= 0.0) {
            return bad("token_init_std", "must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens_small() + 2, 198);
        assert_eq!(c.tokens_large() + 2, 51);
        assert_eq!(c.lora_scaling(), 1.0);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        c.image_size = 200;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.window = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.lora_rank = c.head_dim() + 1;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
