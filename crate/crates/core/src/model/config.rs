use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub down_factors: Vec<usize>,
    pub base_filters: usize,
    pub max_filters: usize,
    pub attention_heads: usize,
    /// Side of the square token grid the bottleneck attends over.
    pub attention_grid: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub positional_embedding: bool,
    pub attention_residual: bool,
    pub bn_eps: f64,
    /// Weight of the newest batch in running statistics.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 5,
            down_factors: vec![2, 2, 2, 4, 4],
            base_filters: 8,
            max_filters: 128,
            attention_heads: 8,
            attention_grid: 6,
            in_channels: 1,
            out_channels: 3,
            positional_embedding: true,
            attention_residual: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Output channels of each down-block.
    pub fn filters(&self) -> Vec<usize> {
        (0..self.depth).map(|i| (self.base_filters << i).min(self.max_filters)).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.filters().last().copied().unwrap_or(self.base_filters)
    }

    /// Total downsampling; inputs are padded to a multiple of this.
    pub fn stride_product(&self) -> usize {
        self.down_factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.down_factors.len() != self.depth {
            return Err(Error::Config(format!(
                "{} down factors for depth {}",
                self.down_factors.len(),
                self.depth
            )));
        }
        if self.down_factors.iter().any(|&f| f < 2) {
            return Err(Error::Config("down factors must be at least 2".into()));
        }
        if self.stride_product() != 128 {
            return Err(Error::Config(format!("down factors multiply to {}, expected 128", self.stride_product())));
        }
        if self.base_filters == 0 || self.max_filters < self.base_filters {
            return Err(Error::Config("filters must satisfy 0 < base_filters <= max_filters".into()));
        }
        let c = self.bottleneck_channels();
        if self.attention_heads == 0 || !c.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!("{c} bottleneck channels not divisible by {} heads", self.attention_heads)));
        }
        if self.attention_grid == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("attention grid and channel counts must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}
