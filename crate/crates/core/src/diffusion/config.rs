use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Shape and seed of the toy denoiser.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Latent grid at the high-resolution level.
    pub grid: (usize, usize),
    /// Channel width at the high- and low-resolution levels.
    pub channels: [usize; 2],
    pub heads: usize,
    pub latent_channels: usize,
    pub embed_dim: usize,
    pub weight_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            grid: (16, 16),
            channels: [32, 64],
            heads: 4,
            latent_channels: 4,
            embed_dim: 32,
            weight_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        for (key, side) in [("grid_height", h), ("grid_width", w)] {
            if side < 8 || !side.is_power_of_two() {
                return Err(Error::config(key, format!("must be a power of two >= 8, got {side}")));
            }
        }
        for c in self.channels {
            if self.heads == 0 || c == 0 || c % self.heads != 0 {
                return Err(Error::config(
                    "channels",
                    format!("{c} channels are not divisible by {} heads", self.heads),
                ));
            }
        }
        if self.latent_channels == 0 || self.embed_dim == 0 {
            return Err(Error::config("latent_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn low_grid(&self) -> (usize, usize) {
        (self.grid.0 / 2, self.grid.1 / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

/// A transformer block of the denoiser. Each block owns one self-attention
/// and one cross-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub stage: Stage,
    /// `true` at the full latent resolution.
    pub high_res: bool,
}

impl LayerId {
    pub const ENCODER: LayerId = LayerId {
        stage: Stage::Encoder,
        high_res: true,
    };
    pub const MIDDLE: LayerId = LayerId {
        stage: Stage::Middle,
        high_res: false,
    };
    /// The highest-resolution decoder block.
    pub const DECODER: LayerId = LayerId {
        stage: Stage::Decoder,
        high_res: true,
    };

    pub const ALL: [LayerId; 3] = [Self::ENCODER, Self::MIDDLE, Self::DECODER];

    pub fn name(self) -> &'static str {
        match self.stage {
            Stage::Encoder => "enc.hi",
            Stage::Middle => "mid.lo",
            Stage::Decoder => "dec.hi",
        }
    }

    pub fn is_highest_resolution_decoder(self) -> bool {
        self == Self::DECODER
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown layer `{s}`"))
    }
}
