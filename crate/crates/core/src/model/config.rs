use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// UNet stage, named by its spatial downsampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "2x")]
    X2,
    #[serde(rename = "4x")]
    X4,
    #[serde(rename = "8x")]
    X8,
    #[serde(rename = "16x")]
    X16,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::X2, Stage::X4, Stage::X8, Stage::X16];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn factor(self) -> usize {
        2 << self.index()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::X2 => "2x",
            Stage::X4 => "4x",
            Stage::X8 => "8x",
            Stage::X16 => "16x",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage {s:?}; expected one of 2x, 4x, 8x, 16x")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Token layout of the temporal adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// One token per frame holding the whole `C·H·W` feature map.
    #[default]
    Literal,
    /// One attention problem per spatial position with `C`-dim frame tokens.
    SpatialShared,
}

/// Encoder or decoder half of the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Path {
    Down,
    Up,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Down => "down",
            Path::Up => "up",
        }
    }
}

fn default_groups() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of an image/frame (`C`); the denoiser predicts this many.
    pub image_channels: usize,
    pub base_channels: usize,
    pub stage_multipliers: [usize; 4],
    pub cross_attention_stages: Vec<Stage>,
    pub res_blocks_per_stage: usize,
    pub text_embed_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub adapter_sites: Vec<Stage>,
    #[serde(default)]
    pub adapter_mode: AdapterMode,
    pub adapter_proj_dim: usize,
    pub frames: usize,
    /// High-resolution frame size the model operates on.
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 3,
            base_channels: 32,
            stage_multipliers: [1, 2, 2, 4],
            cross_attention_stages: vec![Stage::X16],
            res_blocks_per_stage: 1,
            text_embed_dim: 32,
            vocab_size: 16,
            max_text_len: 8,
            adapter_sites: vec![Stage::X8, Stage::X16],
            adapter_mode: AdapterMode::Literal,
            adapter_proj_dim: 16,
            frames: 8,
            height: 32,
            width: 32,
            norm_groups: 8,
        }
    }
}

impl ModelConfig {
    /// Noisy target channels plus the upsampled low-resolution condition.
    pub fn in_channels(&self) -> usize {
        2 * self.image_channels
    }

    pub fn out_channels(&self) -> usize {
        self.image_channels
    }

    pub fn stage_channels(&self, stage: Stage) -> usize {
        self.base_channels * self.stage_multipliers[stage.index()]
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn stage_resolution(&self, stage: Stage) -> (usize, usize) {
        (self.height / stage.factor(), self.width / stage.factor())
    }

    pub fn has_cross_attention(&self, stage: Stage) -> bool {
        self.cross_attention_stages.contains(&stage)
    }

    pub fn has_adapter(&self, stage: Stage) -> bool {
        self.adapter_sites.contains(&stage)
    }

    /// Token width of the adapter at `stage`.
    pub fn adapter_token_dim(&self, stage: Stage) -> usize {
        let c = self.stage_channels(stage);
        match self.adapter_mode {
            AdapterMode::Literal => {
                let (h, w) = self.stage_resolution(stage);
                c * h * w
            }
            AdapterMode::SpatialShared => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_channels", self.image_channels),
            ("base_channels", self.base_channels),
            ("res_blocks_per_stage", self.res_blocks_per_stage),
            ("text_embed_dim", self.text_embed_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("adapter_proj_dim", self.adapter_proj_dim),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("norm_groups", self.norm_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.stage_multipliers.contains(&0) {
            return Err(Error::config("stage_multipliers must be positive"));
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::config("base_channels must be even (sinusoidal time embedding)"));
        }
        if !self.base_channels.is_multiple_of(self.norm_groups) {
            return Err(Error::config(format!(
                "base_channels {} must be divisible by norm_groups {}",
                self.base_channels, self.norm_groups
            )));
        }
        if !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::config(format!(
                "height and width must be divisible by 16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.vocab_size > 256 {
            return Err(Error::config("vocab_size must be at most 256"));
        }
        Ok(())
    }

    /// Short hash of the canonical JSON form, stored with checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Fingerprint of the image part only: independent of adapter settings
    /// and of the clip length, so image and video models can be matched.
    pub fn image_fingerprint(&self) -> String {
        let mut c = self.clone();
        c.adapter_sites.clear();
        c.adapter_mode = AdapterMode::Literal;
        c.adapter_proj_dim = 1;
        c.frames = 1;
        c.fingerprint()
    }
}
