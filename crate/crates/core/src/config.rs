//! Network and pipeline configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::payload::BchParams;
use crate::rdt::RdtConfig;

/// Architecture hyperparameters shared by embed and decode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    pub net_h: usize,
    pub net_w: usize,
    /// Patch size for all attention token grids.
    pub patch: usize,
    /// Token dimension.
    pub dim: usize,
    pub heads: usize,
    /// Attention depth of tokenizers/detokenizers.
    pub tok_depth: usize,
    /// Number of token affine coupling blocks.
    pub n_tacb: usize,
    /// Clamp for the rho learner output before exp.
    pub rho_max: f64,
    /// Base channels of the feature enhancement network.
    pub fen_channels: usize,
    /// Encoder-decoder scales of the FEN.
    pub fen_scales: usize,
    /// Whether the decode path runs the FEN at all.
    pub use_fen: bool,
    /// Convolutional coupling blocks in the anchor flow.
    pub anchor_blocks: usize,
    /// Growth channels of the anchor coupling subnets.
    pub anchor_hidden: usize,
    /// Whether the anchor stage is embedded at all.
    pub use_anchor: bool,
    /// Condition-number proxy cap for the broadcast matrix.
    pub cond_cap: f64,
    /// Std of the Gaussian that seeds the lost flow branches at decode time.
    pub noise_std: f64,
}

impl NetConfig {
    /// Desk-scale profile: 96x96 inputs, 2 TACBs.
    pub fn toy() -> Self {
        NetConfig {
            net_h: 96,
            net_w: 96,
            patch: 8,
            dim: 64,
            heads: 4,
            tok_depth: 2,
            n_tacb: 2,
            rho_max: 2.0,
            fen_channels: 12,
            fen_scales: 2,
            use_fen: true,
            anchor_blocks: 2,
            anchor_hidden: 8,
            use_anchor: true,
            cond_cap: 1e6,
            noise_std: 1.0,
        }
    }

    /// Paper-scale profile: 384x384 inputs, patch 16, dim 768, 4 TACBs.
    /// Training it is far outside desk budgets; the profile exists so the
    /// configuration and shapes are exercised.
    pub fn full() -> Self {
        NetConfig {
            net_h: 384,
            net_w: 384,
            patch: 16,
            dim: 768,
            heads: 8,
            tok_depth: 4,
            n_tacb: 4,
            rho_max: 2.0,
            fen_channels: 32,
            fen_scales: 3,
            use_fen: true,
            anchor_blocks: 4,
            anchor_hidden: 16,
            use_anchor: true,
            cond_cap: 1e6,
            noise_std: 1.0,
        }
    }

    pub fn net(&self) -> (usize, usize) {
        (self.net_h, self.net_w)
    }

    pub fn token_count(&self) -> usize {
        (self.net_h / self.patch) * (self.net_w / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.net_h % self.patch != 0 || self.net_w % self.patch != 0 {
            return Err(Error::Config("net size must be a multiple of the patch size".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config("token dim must divide into heads".into()));
        }
        let div = 1 << (self.fen_scales.max(1) - 1);
        if self.net_h % div != 0 || self.net_w % div != 0 {
            return Err(Error::Config("net size must divide by 2^(fen_scales-1)".into()));
        }
        if self.rho_max <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("rho_max must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a deployed encoder/decoder needs besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub rdt: RdtConfig,
    pub bch: BchParams,
}

impl ModelConfig {
    pub fn toy() -> Self {
        let net = NetConfig::toy();
        ModelConfig {
            net,
            rdt: RdtConfig { h: 4, w: 8, c_h: 4, c_w: 2, net_h: net.net_h, net_w: net.net_w },
            bch: BchParams::TOY,
        }
    }

    pub fn full() -> Self {
        let net = NetConfig::full();
        ModelConfig {
            net,
            rdt: RdtConfig { h: 18, w: 18, c_h: 2, c_w: 2, net_h: net.net_h, net_w: net.net_w },
            bch: BchParams::FULL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.rdt.validate()?;
        if self.rdt.net_h != self.net.net_h || self.rdt.net_w != self.net.net_w {
            return Err(Error::Config("RDT raster size must equal the net size".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert_eq!(NetConfig::toy().token_count(), 144);
        assert_eq!(NetConfig::full().token_count(), 576);
    }

    #[test]
    fn bad_patch_rejected() {
        let mut cfg = NetConfig::toy();
        cfg.patch = 7;
        assert!(cfg.validate().is_err());
    }
}
